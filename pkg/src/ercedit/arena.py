"""Pairwise-comparison rating engine for the human study arena.

Ratings start at 1500 and move by K * (score - expected) per vote; the
expected score is the logistic 1 / (1 + 10^((R_B - R_A)/400)). A's delta is
computed once and negated for B, so the rating sum is conserved exactly.
Votes live in an append-only log; state is always a pure replay of the log,
per criterion ("successful" and "localized" keep separate tables).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

INITIAL_RATING = 1500.0
K_FACTOR = 32.0
CRITERIA = ("successful", "localized")
OUTCOMES = ("a", "b", "draw")


class VoteRejected(ValueError):
    pass


class DuplicateVote(VoteRejected):
    pass


@dataclass(frozen=True)
class Vote:
    item_id: str
    model_a: str
    model_b: str
    outcome: str  # "a", "b", or "draw"
    criterion: str
    rater_id: str
    timestamp: float = 0.0

    def validate(self, known_models: set[str]) -> None:
        if self.model_a == self.model_b:
            raise VoteRejected("a vote needs two distinct models")
        if self.outcome not in OUTCOMES:
            raise VoteRejected(f"unknown outcome {self.outcome!r}")
        if self.criterion not in CRITERIA:
            raise VoteRejected(f"unknown criterion {self.criterion!r}")
        for m in (self.model_a, self.model_b):
            if m not in known_models:
                raise VoteRejected(f"unknown model {m!r}")


@dataclass
class ComparisonTask:
    item_id: str
    instruction: str
    criterion: str
    # candidates in presentation order; the mapping back to model ids is
    # recorded server-side and never shown to the rater
    slots: tuple[str, str]  # model ids, presentation order
    flipped: bool


def expected_score(rating_a: float, rating_b: float) -> float:
    """Win probability of A against B; complements sum to 1."""
    return 1.0 / (1.0 + 10.0 ** ((rating_b - rating_a) / 400.0))


@dataclass
class EloState:
    models: list[str] = field(default_factory=list)
    k: float = K_FACTOR
    # one rating table per criterion
    ratings: dict[str, dict[str, float]] = field(default_factory=dict)
    vote_log: list[Vote] = field(default_factory=list)
    # (item, rater, model pair, criterion) already judged
    _seen: set[tuple] = field(default_factory=set, repr=False)
    # per criterion, per model: [wins, losses, draws]
    _tallies: dict[str, dict[str, list[int]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for criterion in CRITERIA:
            self.ratings.setdefault(criterion, {})
            self._tallies.setdefault(criterion, {})
        for m in self.models:
            self._register_tables(m)

    def _register_tables(self, model: str) -> None:
        for criterion in CRITERIA:
            self.ratings[criterion].setdefault(model, INITIAL_RATING)
            self._tallies[criterion].setdefault(model, [0, 0, 0])

    def register_model(self, model: str) -> None:
        if model not in self.models:
            self.models.append(model)
        self._register_tables(model)

    @staticmethod
    def _vote_key(vote: Vote) -> tuple:
        pair = tuple(sorted((vote.model_a, vote.model_b)))
        return (vote.item_id, vote.rater_id, pair, vote.criterion)

    def record_vote(self, vote: Vote) -> tuple[float, float]:
        """Apply one vote; returns the two updated ratings.

        Duplicate (item, rater, pair, criterion) votes are rejected
        idempotently: the state is unchanged.
        """
        vote.validate(set(self.models))
        key = self._vote_key(vote)
        if key in self._seen:
            raise DuplicateVote(f"already voted: {key}")
        table = self.ratings[vote.criterion]
        score_a = {"a": 1.0, "b": 0.0, "draw": 0.5}[vote.outcome]
        e_a = expected_score(table[vote.model_a], table[vote.model_b])
        delta = self.k * (score_a - e_a)
        table[vote.model_a] += delta
        table[vote.model_b] -= delta
        tallies = self._tallies[vote.criterion]
        if vote.outcome == "draw":
            tallies[vote.model_a][2] += 1
            tallies[vote.model_b][2] += 1
        else:
            winner = vote.model_a if vote.outcome == "a" else vote.model_b
            loser = vote.model_b if vote.outcome == "a" else vote.model_a
            tallies[winner][0] += 1
            tallies[loser][1] += 1
        self._seen.add(key)
        self.vote_log.append(vote)
        return table[vote.model_a], table[vote.model_b]

    def leaderboard(self, criterion: str) -> list[dict]:
        """Models by descending rating with win rates (draws count in the
        denominator)."""
        if criterion not in CRITERIA:
            raise VoteRejected(f"unknown criterion {criterion!r}")
        if not any(v.criterion == criterion for v in self.vote_log):
            return []
        rows = []
        for model in self.models:
            wins, losses, draws = self._tallies[criterion][model]
            total = wins + losses + draws
            rows.append({
                "model": model,
                "rating": self.ratings[criterion][model],
                "votes": total,
                "win_rate": 100.0 * wins / total if total else 0.0,
            })
        return sorted(rows, key=lambda r: -r["rating"])


@dataclass
class ArenaStore:
    """Elo state plus the comparison-task inventory and scheduling."""

    state: EloState = field(default_factory=EloState)
    items: dict[str, str] = field(default_factory=dict)  # item id -> instruction
    # item id -> model id -> image path
    images: dict[str, dict[str, str]] = field(default_factory=dict)

    def add_item(self, item_id: str, instruction: str,
                 candidates: dict[str, str], input_image: str | None = None) -> None:
        self.items[item_id] = instruction
        self.images[item_id] = dict(candidates)
        if input_image is not None:
            self.images[item_id]["__input__"] = input_image
        for model in candidates:
            self.state.register_model(model)

    def next_pair(self, rng: np.random.Generator, rater_id: str,
                  criterion: str) -> ComparisonTask | None:
        """Uniformly random unjudged (item, model pair) for this rater, or None."""
        open_tasks = []
        for item_id in sorted(self.items):
            models = sorted(m for m in self.images[item_id] if m != "__input__")
            for i in range(len(models)):
                for j in range(i + 1, len(models)):
                    key = (item_id, rater_id, (models[i], models[j]), criterion)
                    if key not in self.state._seen:
                        open_tasks.append((item_id, models[i], models[j]))
        if not open_tasks:
            return None
        item_id, m1, m2 = open_tasks[int(rng.integers(len(open_tasks)))]
        flipped = bool(rng.integers(2))
        slots = (m2, m1) if flipped else (m1, m2)
        return ComparisonTask(item_id=item_id, instruction=self.items[item_id],
                              criterion=criterion, slots=slots, flipped=flipped)


# --- persistence -------------------------------------------------------------

def append_vote(path: str, vote: Vote) -> None:
    """One JSON object per line; fsync so a crash never loses an acked vote."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(asdict(vote)) + "\n")
        f.flush()
        os.fsync(f.fileno())


def persist(state: EloState, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for vote in state.vote_log:
            f.write(json.dumps(asdict(vote)) + "\n")
    os.replace(tmp, path)


def restore(path: str, models: list[str], k: float = K_FACTOR
            ) -> tuple[EloState, int | None]:
    """Replay the vote log; returns (state, byte offset of first corrupt line).

    Restore stops at the last valid line; the offset is None for a clean log.
    """
    state = EloState(models=list(models), k=k)
    if not os.path.exists(path):
        return state, None
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            try:
                rec = json.loads(raw.decode("utf-8"))
                vote = Vote(**rec)
                vote.validate(set(state.models) | {vote.model_a, vote.model_b})
            except (ValueError, TypeError):
                return state, offset
            state.register_model(vote.model_a)
            state.register_model(vote.model_b)
            try:
                state.record_vote(vote)
            except DuplicateVote:
                pass  # replay after partial append is harmless
            offset += len(raw)
    return state, None


def make_vote(item_id: str, model_a: str, model_b: str, outcome: str,
              criterion: str, rater_id: str) -> Vote:
    return Vote(item_id=item_id, model_a=model_a, model_b=model_b,
                outcome=outcome, criterion=criterion, rater_id=rater_id,
                timestamp=time.time())
