"""Procedural editable-scenes dataset.

Scenes are 1-4 colored shapes on a 3x3 grid, rendered at 32x32. Every
sampled edit comes with a forward instruction, an edited caption, and a
reverse instruction that is the exact structural inverse under the template
grammar, so the symbolic round trip (forward then reverse) is the identity.

An LLM pathway mirrors the prompt-based generation flow for free-form
captions; in tests it runs against recorded fixture responses.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .embedding import InputError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "white")
BACKGROUNDS = ("black", "gray")

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 50),
    "purple": (160, 60, 200),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "gray": (70, 70, 70),
}

CELL_NAMES = (
    "top left", "top center", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom center", "bottom right",
)
IMAGE_SIZE = 32
GRID = 3


class NoApplicableEdit(RuntimeError):
    """Sampled scene admits none of the requested edit types."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # 0..8, row-major

    def phrase(self) -> str:
        return f"a {self.color} {self.shape} in the {CELL_NAMES[self.cell]}"


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background: str = "black"

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise InputError("two objects share a grid cell")
        if not 1 <= len(self.objects) <= 4:
            raise InputError("scenes have 1-4 objects")

    def sorted_objects(self) -> tuple[SceneObject, ...]:
        return tuple(sorted(self.objects, key=lambda o: o.cell))

    def canonical(self) -> "SceneSpec":
        return SceneSpec(self.sorted_objects(), self.background)


@dataclass
class EditSample:
    """One training or eval record. gt_image is populated only for eval records."""

    id: str
    input_caption: str
    edit_instruction: str
    edited_caption: str
    reverse_instruction: str
    image: str = ""
    gt_image: str | None = None
    split: str = "train"


# --- rendering ---------------------------------------------------------------

def _cell_box(cell: int, size: int = IMAGE_SIZE) -> tuple[int, int, int, int]:
    r, c = divmod(cell, GRID)
    y0, y1 = round(r * size / GRID), round((r + 1) * size / GRID)
    x0, x1 = round(c * size / GRID), round((c + 1) * size / GRID)
    return y0, y1, x0, x1


def render_scene(spec: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic rasterization to file space uint8 HWC."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = COLOR_RGB[spec.background]
    for obj in spec.objects:
        y0, y1, x0, x1 = _cell_box(cell=obj.cell, size=size)
        h, w = y1 - y0, x1 - x0
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        if obj.shape == "circle":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (min(h, w) / 2 - 1) ** 2
        elif obj.shape == "square":
            m = 1
            mask = (yy >= m) & (yy < h - m) & (xx >= m) & (xx < w - m)
        else:  # upward triangle
            half = (min(h, w) / 2 - 1)
            mask = (yy >= cy - half) & (yy <= cy + half) \
                & (np.abs(xx - cx) <= (yy - (cy - half)) / 2 + 0.5)
        img[y0:y1, x0:x1][mask] = COLOR_RGB[obj.color]
    return img


def render_model_space(spec: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    return render_scene(spec, size).astype(np.float32) / 255.0 * 2.0 - 1.0


# --- captions ----------------------------------------------------------------

def caption(spec: SceneSpec) -> str:
    return " and ".join(o.phrase() for o in spec.sorted_objects())


_PHRASE_RE = re.compile(
    rf"a ({'|'.join(COLORS)}) ({'|'.join(SHAPES)}) in the ({'|'.join(CELL_NAMES)})$")


def parse_caption(text: str, background: str = "black") -> SceneSpec:
    """Invert the caption grammar back to a scene spec."""
    objects = []
    for phrase in text.split(" and "):
        m = _PHRASE_RE.match(phrase.strip())
        if m is None:
            raise InputError(f"unparseable caption phrase: {phrase!r}")
        color, shape, pos = m.groups()
        objects.append(SceneObject(shape=shape, color=color, cell=CELL_NAMES.index(pos)))
    return SceneSpec(tuple(objects), background)


def caption_vocabulary() -> list[str]:
    """Closure of every word the caption and instruction templates can emit."""
    words = {"a", "and", "in", "the", "on", "make", "add", "remove", "move",
             "to", "from", "back"}
    words.update(SHAPES)
    words.update(COLORS)
    for name in CELL_NAMES:
        words.update(name.split())
    return sorted(words)


# --- symbolic edits ----------------------------------------------------------

def _object_reference(spec: SceneSpec, obj: SceneObject) -> str:
    """Shortest unambiguous reference: bare shape if unique, else color + shape."""
    if sum(1 for o in spec.objects if o.shape == obj.shape) == 1:
        return obj.shape
    return f"{obj.color} {obj.shape}"


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    n = int(rng.integers(1, 5))
    cells = rng.choice(9, size=n, replace=False)
    combos: list[tuple[str, str]] = []
    while len(combos) < n:
        combo = (str(rng.choice(SHAPES)), str(rng.choice(COLORS)))
        if combo not in combos:
            combos.append(combo)
    objects = tuple(SceneObject(shape=s, color=c, cell=int(cell))
                    for (s, c), cell in zip(combos, cells))
    return SceneSpec(objects).canonical()


def sample_edit(spec: SceneSpec, rng: np.random.Generator,
                edit_types: tuple[str, ...] = ("recolor", "add", "remove", "move"),
                ) -> tuple[EditSample, SceneSpec]:
    """Sample one applicable edit; the reverse instruction round-trips the spec."""
    applicable = []
    free_cells = sorted(set(range(9)) - {o.cell for o in spec.objects})
    if "recolor" in edit_types:
        applicable.append("recolor")
    if "add" in edit_types and free_cells and len(spec.objects) < 4:
        applicable.append("add")
    if "remove" in edit_types and len(spec.objects) > 1:
        applicable.append("remove")
    if "move" in edit_types and free_cells:
        applicable.append("move")
    if not applicable:
        raise NoApplicableEdit(f"no edit in {edit_types} applies")

    kind = str(rng.choice(applicable))
    objects = list(spec.objects)
    idx = int(rng.integers(len(objects)))
    target = objects[idx]

    if kind == "recolor":
        taken = {(o.color, o.shape) for o in objects}
        choices = [c for c in COLORS
                   if c != target.color and (c, target.shape) not in taken]
        if not choices:
            raise NoApplicableEdit("no free recolor target")
        new_color = str(rng.choice(choices))
        ref = _object_reference(spec, target)
        objects[idx] = replace(target, color=new_color)
        edited = SceneSpec(tuple(objects), spec.background).canonical()
        new_ref = _object_reference(edited, objects[idx])
        forward = f"make the {ref} {new_color}"
        reverse = f"make the {new_ref} {target.color}"
    elif kind == "add":
        cell = int(rng.choice(free_cells))
        taken = {(o.color, o.shape) for o in objects}
        combos = [(s, c) for s in SHAPES for c in COLORS if (c, s) not in taken]
        shape, color = combos[int(rng.integers(len(combos)))]
        new_obj = SceneObject(shape=shape, color=color, cell=cell)
        objects.append(new_obj)
        edited = SceneSpec(tuple(objects), spec.background).canonical()
        forward = f"add a {color} {shape} to the {CELL_NAMES[cell]}"
        reverse = f"remove the {color} {shape} from the {CELL_NAMES[cell]}"
    elif kind == "remove":
        del objects[idx]
        edited = SceneSpec(tuple(objects), spec.background).canonical()
        forward = f"remove the {target.color} {target.shape} from the {CELL_NAMES[target.cell]}"
        reverse = f"add a {target.color} {target.shape} to the {CELL_NAMES[target.cell]}"
    else:  # move
        cell = int(rng.choice(free_cells))
        objects[idx] = replace(target, cell=cell)
        edited = SceneSpec(tuple(objects), spec.background).canonical()
        forward = f"move the {target.color} {target.shape} to the {CELL_NAMES[cell]}"
        reverse = f"move the {target.color} {target.shape} to the {CELL_NAMES[target.cell]}"

    sample = EditSample(id="", input_caption=caption(spec), edit_instruction=forward,
                        edited_caption=caption(edited), reverse_instruction=reverse)
    return sample, edited


def apply_instruction(spec: SceneSpec, instruction: str) -> SceneSpec:
    """Interpret a templated instruction against a spec (symbolic oracle)."""
    words = instruction.split()
    objects = list(spec.objects)

    def find(ref_words: list[str]) -> int:
        if len(ref_words) == 1:
            matches = [i for i, o in enumerate(objects) if o.shape == ref_words[0]]
        else:
            matches = [i for i, o in enumerate(objects)
                       if o.color == ref_words[0] and o.shape == ref_words[1]]
        if len(matches) != 1:
            raise InputError(f"ambiguous or missing reference {' '.join(ref_words)!r}")
        return matches[0]

    if words[0] == "make":  # make the [color] shape newcolor
        ref, new_color = words[2:-1], words[-1]
        i = find(ref)
        objects[i] = replace(objects[i], color=new_color)
    elif words[0] == "add":  # add a color shape to the <position>
        color, shape = words[2], words[3]
        pos = " ".join(words[6:])
        objects.append(SceneObject(shape=shape, color=color, cell=CELL_NAMES.index(pos)))
    elif words[0] == "remove":  # remove the color shape from the <position>
        color, shape = words[2], words[3]
        pos = " ".join(words[6:])
        cell = CELL_NAMES.index(pos)
        matches = [i for i, o in enumerate(objects)
                   if o.color == color and o.shape == shape and o.cell == cell]
        if len(matches) != 1:
            raise InputError(f"cannot remove: {instruction!r}")
        del objects[matches[0]]
    elif words[0] == "move":  # move the color shape to the <position>
        color, shape = words[2], words[3]
        pos = " ".join(words[6:])
        i = find([color, shape])
        objects[i] = replace(objects[i], cell=CELL_NAMES.index(pos))
    else:
        raise InputError(f"unknown instruction: {instruction!r}")
    return SceneSpec(tuple(objects), spec.background).canonical()


# --- LLM pathway -------------------------------------------------------------

_PROMPT_DIR = os.path.join(os.path.dirname(__file__), "prompts")


def load_prompt(name: str) -> str:
    with open(os.path.join(_PROMPT_DIR, name + ".txt"), encoding="utf-8") as f:
        return f.read()


def render_reverse_prompt(input_caption: str, edit_instruction: str,
                          edited_caption: str) -> str:
    template = load_prompt("reverse_instruction")
    rendered = (template
                .replace("{input_caption}", input_caption)
                .replace("{edit_instruction}", edit_instruction)
                .replace("{edited_caption}", edited_caption))
    # the stored listing ends with the response placeholder; the request stops there
    return rendered.replace("{reverse_instruction}", "").rstrip() + "\n"


def render_multi_edit_prompt(input_caption: str) -> str:
    template = load_prompt("multi_edit")
    return template.replace("{input_caption}", input_caption)


class LLMError(RuntimeError):
    pass


class LLMParseError(LLMError):
    def __init__(self, message: str, payload: str):
        super().__init__(f"{message}; raw payload: {payload!r}")
        self.payload = payload


class LLMClient:
    """Base client: bounded retries plus response caching keyed by request."""

    max_retries = 3

    def __init__(self, cache_path: str | None = None):
        self._cache: dict[str, str] = {}
        self._cache_path = cache_path
        if cache_path and os.path.exists(cache_path):
            with open(cache_path, encoding="utf-8") as f:
                self._cache = json.load(f)

    def _send(self, prompt: str) -> str:
        raise NotImplementedError

    @staticmethod
    def cache_key(template: str, inputs: dict[str, str]) -> str:
        return json.dumps({"template": template, "inputs": inputs}, sort_keys=True)

    def complete(self, template: str, inputs: dict[str, str], prompt: str) -> str:
        key = self.cache_key(template, inputs)
        if key in self._cache:
            return self._cache[key]
        last: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                response = self._send(prompt)
                break
            except Exception as exc:  # transport failures only
                last = exc
                time.sleep(min(0.05 * 2 ** attempt, 1.0))
        else:
            raise LLMError(f"transport failed after {self.max_retries} retries: {last}")
        self._cache[key] = response
        if self._cache_path:
            tmp = self._cache_path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(self._cache, f, indent=1, sort_keys=True)
            os.replace(tmp, self._cache_path)
        return response


class FixtureLLMClient(LLMClient):
    """Replays recorded responses; deterministic and offline."""

    def __init__(self, fixture_path: str | None = None):
        super().__init__(cache_path=None)
        path = fixture_path or os.path.join(os.path.dirname(__file__),
                                            "fixtures", "llm_fixtures.json")
        with open(path, encoding="utf-8") as f:
            self._cache = json.load(f)

    def _send(self, prompt: str) -> str:
        raise LLMError("fixture client has no recorded response for this request")


def generate_reverse_instruction(client: LLMClient, input_caption: str,
                                 edit_instruction: str, edited_caption: str) -> str:
    if not (input_caption.strip() and edit_instruction.strip() and edited_caption.strip()):
        raise InputError("empty field")
    inputs = {"input_caption": input_caption, "edit_instruction": edit_instruction,
              "edited_caption": edited_caption}
    prompt = render_reverse_prompt(**inputs)
    response = client.complete("reverse_instruction", inputs, prompt)
    for line in response.splitlines():
        line = line.strip().strip('"')
        if line:
            return line
    raise LLMParseError("empty reverse-instruction response", response)


_MULTI_EDIT_RE = re.compile(
    r"(\d)\.\s*Edit Instruction:\s*(.+?)\s*\n\s*Edited Caption:\s*(.+?)\s*\n"
    r"\s*Reverse Instruction:\s*(.+?)\s*(?:\n|$)")


def generate_multi_edits(client: LLMClient, input_caption: str
                         ) -> list[tuple[str, str, str]]:
    """Four (forward instruction, edited caption, reverse instruction) triples."""
    if not input_caption.strip():
        raise InputError("empty caption")
    inputs = {"input_caption": input_caption}
    prompt = render_multi_edit_prompt(input_caption)
    response = client.complete("multi_edit", inputs, prompt)
    triples = [(m.group(2), m.group(3), m.group(4))
               for m in _MULTI_EDIT_RE.finditer(response)]
    if len(triples) != 4:
        raise LLMParseError(f"expected 4 numbered triples, parsed {len(triples)}",
                            response)
    return triples


# --- filtering ---------------------------------------------------------------

@dataclass
class FilterReport:
    kept: int
    dropped: int
    threshold: float
    histogram: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.kept + self.dropped


def filter_pairs(records: list[tuple[EditSample, np.ndarray]], backend, threshold: float = 0.2
                 ) -> tuple[list[tuple[EditSample, np.ndarray]], FilterReport]:
    """Keep records whose image/input-caption cosine similarity is >= threshold."""
    from .embedding import cosine, embed_image, embed_text

    kept = []
    hist: dict[str, int] = {}
    for sample, image in records:
        sim = cosine(embed_image(image, backend),
                     embed_text(sample.input_caption, backend))
        bucket = f"{np.floor(sim * 10) / 10:+.1f}"
        hist[bucket] = hist.get(bucket, 0) + 1
        if sim >= threshold:
            kept.append((sample, image))
    report = FilterReport(kept=len(kept), dropped=len(records) - len(kept),
                          threshold=threshold, histogram=dict(sorted(hist.items())))
    return kept, report


# --- dataset generation and I/O ----------------------------------------------

@dataclass
class GeneratedDataset:
    samples: list[EditSample]
    specs: dict[str, tuple[SceneSpec, SceneSpec]]  # id -> (input spec, edited spec)


def spec_key(spec: SceneSpec) -> str:
    body = json.dumps([(o.shape, o.color, o.cell) for o in spec.sorted_objects()]
                      + [spec.background])
    return hashlib.sha1(body.encode()).hexdigest()


def generate_dataset(n: int, seed: int,
                     split_fractions: tuple[float, float] = (0.8, 0.1)
                     ) -> GeneratedDataset:
    """n records over distinct input scenes, split train/val/test disjointly."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    samples: list[EditSample] = []
    specs: dict[str, tuple[SceneSpec, SceneSpec]] = {}
    while len(samples) < n:
        spec = sample_scene(rng)
        key = spec_key(spec)
        if key in seen:
            continue
        try:
            sample, edited = sample_edit(spec, rng)
        except NoApplicableEdit:
            continue
        seen.add(key)
        sample.id = f"s{len(samples):06d}"
        samples.append(sample)
        specs[sample.id] = (spec, edited)
    n_train = int(n * split_fractions[0])
    n_val = int(n * split_fractions[1])
    for i, sample in enumerate(samples):
        sample.split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return GeneratedDataset(samples, specs)


def generate_sessions(n_sessions: int, turns: int, seed: int
                      ) -> list[list[tuple[EditSample, np.ndarray, np.ndarray]]]:
    """Chained eval sessions: each turn edits the previous turn's GT scene.

    Every record carries (sample, input render, GT edited render) in model
    space, so turn t's GT equals turn t+1's input by construction.
    """
    if turns < 1:
        raise InputError("sessions need at least one turn")
    rng = np.random.default_rng(seed)
    sessions = []
    for si in range(n_sessions):
        spec = sample_scene(rng)
        session = []
        for turn in range(turns):
            while True:
                try:
                    sample, edited = sample_edit(spec, rng)
                    break
                except NoApplicableEdit:
                    spec = sample_scene(rng)
            sample.id = f"sess{si:04d}t{turn}"
            sample.split = "test"
            session.append((sample, render_model_space(spec),
                            render_model_space(edited)))
            spec = edited
        sessions.append(session)
    return sessions


def write_dataset(dataset: GeneratedDataset, out_dir: str) -> str:
    """JSONL records plus PNG images; eval splits also get GT edited renders."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    path = os.path.join(out_dir, "data.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for sample in dataset.samples:
            spec, edited = dataset.specs[sample.id]
            rel = os.path.join("images", f"{sample.id}.png")
            Image.fromarray(render_scene(spec)).save(os.path.join(out_dir, rel))
            sample.image = rel
            record = {
                "id": sample.id,
                "input_caption": sample.input_caption,
                "edit_instruction": sample.edit_instruction,
                "edited_caption": sample.edited_caption,
                "reverse_instruction": sample.reverse_instruction,
                "image": rel,
                "split": sample.split,
            }
            if sample.split != "train":
                gt_rel = os.path.join("gt", f"{sample.id}.png")
                Image.fromarray(render_scene(edited)).save(os.path.join(out_dir, gt_rel))
                sample.gt_image = gt_rel
                record["gt_image"] = gt_rel
            f.write(json.dumps(record) + "\n")
    return path


def read_dataset(dataset_dir: str) -> list[EditSample]:
    samples = []
    with open(os.path.join(dataset_dir, "data.jsonl"), encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            samples.append(EditSample(
                id=rec["id"], input_caption=rec["input_caption"],
                edit_instruction=rec["edit_instruction"],
                edited_caption=rec["edited_caption"],
                reverse_instruction=rec["reverse_instruction"],
                image=rec["image"], gt_image=rec.get("gt_image"),
                split=rec["split"]))
    return samples


def load_image(dataset_dir: str, rel_path: str) -> np.ndarray:
    """PNG -> model-space float32 HWC."""
    arr = np.asarray(Image.open(os.path.join(dataset_dir, rel_path)), dtype=np.float32)
    return arr / 255.0 * 2.0 - 1.0
