"""Versioned run checkpoints: pause, inspect, and resume exactly.

A checkpoint captures one trainer completely (parameter vectors, both
replay memories with their stored teacher outputs and diversity scores,
generator states, and step counts) as JSON with float64 arrays encoded
as little-endian base64. Restoring and continuing a run produces results
bitwise identical to never having stopped.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict

import numpy as np

from .buffers import BufferEntry
from .errors import CheckpointError
from .model import HeatmapPredictor, PredictorConfig, Sample
from .trainer import HyperParams, OnlineTrainer, _TRAINER_CLASSES

CHECKPOINT_VERSION = 1


def _enc_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"dtype": str(a.dtype), "shape": list(a.shape),
            "data": base64.b64encode(a.astype(a.dtype.newbyteorder("<")).tobytes()).decode()}


def _dec_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"]).newbyteorder("<"))
    return a.reshape(d["shape"]).astype(d["dtype"], copy=True)


def _enc_sample(s: Sample) -> dict:
    return {"dynamic": _enc_array(s.dynamic), "static": _enc_array(s.static),
            "goal": _enc_array(s.goal), "speed": s.speed, "task_id": s.task_id}


def _dec_sample(d: dict) -> Sample:
    return Sample(dynamic=_dec_array(d["dynamic"]), static=_dec_array(d["static"]),
                  goal=_dec_array(d["goal"]), speed=float(d["speed"]),
                  task_id=int(d["task_id"]))


def _enc_entry(e: BufferEntry) -> dict:
    return {"sample": _enc_sample(e.sample),
            "teacher": None if e.teacher is None else _enc_array(e.teacher),
            "step": e.step}


def _dec_entry(d: dict) -> BufferEntry:
    teacher = None if d["teacher"] is None else _dec_array(d["teacher"])
    return BufferEntry(sample=_dec_sample(d["sample"]), teacher=teacher,
                       step=int(d["step"]))


def _enc_buffer_state(state: dict) -> dict:
    out = dict(state)
    out["items"] = [_enc_entry(e) for e in state["items"]]
    return out


def _dec_buffer_state(state: dict) -> dict:
    out = dict(state)
    out["items"] = [_dec_entry(d) for d in state["items"]]
    return out


def save_checkpoint(trainer: OnlineTrainer, path: str) -> None:
    """Write a resumable snapshot of the trainer to ``path``."""
    p = trainer.predictor
    state = trainer.state_dict()
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": state["kind"],
        "seed": state["seed"],
        "hyper": state["hyper"],
        "step_count": state["step_count"],
        "predictor": {"config": asdict(p.config), "d_v": p.d_v, "d_s": p.d_s,
                      "d_e": p.d_e},
        "theta": {k: _enc_array(state[k]) for k in
                  ("theta_w", "theta_f", "theta_s") if k in state},
        "rng": state["rng"],
        "res": _enc_buffer_state(state["res"]),
        "div": _enc_buffer_state(state["div"]),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> OnlineTrainer:
    """Rebuild a trainer from a snapshot; refuses unknown versions."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    try:
        version = doc["version"]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is not supported "
                f"(this build reads version {CHECKPOINT_VERSION})")
        pc = doc["predictor"]
        cfg = dict(pc["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        predictor = HeatmapPredictor(PredictorConfig(**cfg),
                                     pc["d_v"], pc["d_s"], pc["d_e"])
        hyper = HyperParams(**doc["hyper"])
        res_state = _dec_buffer_state(doc["res"])
        div_state = _dec_buffer_state(doc["div"])
        cls = _TRAINER_CLASSES[doc["kind"]]
        trainer = cls(predictor, hyper,
                      res_capacity=res_state["capacity"],
                      div_capacity=div_state["capacity"],
                      seed=doc["seed"],
                      score_batch=div_state["score_batch"])
        state = {
            "kind": doc["kind"], "seed": doc["seed"], "hyper": doc["hyper"],
            "step_count": doc["step_count"],
            "rng": doc["rng"], "res": res_state, "div": div_state,
        }
        for key, enc in doc["theta"].items():
            state[key] = _dec_array(enc)
        trainer.load_state_dict(state)
        return trainer
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint is corrupt or incomplete: {e!r}") from e
