"""HTTP+JSON service wrapping the arena: vote ingestion, leaderboards,
task scheduling, and candidate images for the voting frontend."""

from __future__ import annotations

import os
import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse
from pydantic import BaseModel

from .arena import (ArenaStore, DuplicateVote, VoteRejected, append_vote,
                    make_vote)


class VotePayload(BaseModel):
    item_id: str
    model_a: str
    model_b: str
    outcome: str
    criterion: str
    rater_id: str


def create_app(store: ArenaStore, log_path: str | None = None,
               token: str = "", seed: int = 0) -> FastAPI:
    app = FastAPI(title="edit-arena")
    write_lock = threading.Lock()  # votes are serialized; log order = arrival order
    rng = np.random.default_rng(seed)

    def check_auth(request: Request) -> None:
        if token and request.headers.get("authorization") != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="bad token")

    @app.post("/api/votes")
    def post_vote(payload: VotePayload, request: Request):
        check_auth(request)
        vote = make_vote(payload.item_id, payload.model_a, payload.model_b,
                         payload.outcome, payload.criterion, payload.rater_id)
        with write_lock:
            try:
                rating_a, rating_b = store.state.record_vote(vote)
            except DuplicateVote as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            except VoteRejected as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            if log_path:
                append_vote(log_path, vote)
        return {"applied": True, "ratings": {"a": rating_a, "b": rating_b}}

    @app.get("/api/leaderboard")
    def leaderboard(criterion: str, request: Request):
        check_auth(request)
        try:
            return store.state.leaderboard(criterion)
        except VoteRejected as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/api/tasks/next")
    def next_task(rater_id: str, criterion: str, request: Request):
        check_auth(request)
        with write_lock:
            task = store.next_pair(rng, rater_id, criterion)
        if task is None:
            return {"done": True}
        return {
            "done": False,
            "item_id": task.item_id,
            "instruction": task.instruction,
            "criterion": task.criterion,
            "slots": list(task.slots),
            "input_image": f"/api/items/{task.item_id}/input",
            "candidate_images": [
                f"/api/items/{task.item_id}/images/{m}" for m in task.slots],
        }

    @app.get("/api/items/{item_id}/images/{model}")
    def item_image(item_id: str, model: str):
        path = store.images.get(item_id, {}).get(model)
        if path is None or not os.path.exists(path):
            raise HTTPException(status_code=404, detail="no such image")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/items/{item_id}/input")
    def input_image(item_id: str):
        path = store.images.get(item_id, {}).get("__input__")
        if path is None or not os.path.exists(path):
            raise HTTPException(status_code=404, detail="no such image")
        return FileResponse(path, media_type="image/png")

    return app
