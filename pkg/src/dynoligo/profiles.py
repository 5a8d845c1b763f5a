"""Saving and loading strategy profiles and training logs.

A profile file is a numpy ``.npz`` archive. Every archive carries
``format_version``, ``kind`` (``network``, ``open_loop`` or ``linear_feedback``),
the market config as JSON, and its hash. Networks add ``layer_shapes`` and a
flat parameter vector in ``StackedMLP.parameters()`` order; the analytic kinds
store their price or coefficient tables directly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .analytic import LinearFeedbackEquilibrium, OpenLoopEquilibrium
from .errors import ConfigMismatch, DynOligoError
from .learn import LearnedProfile, NetworkPolicy, StackedMLP
from .market import MarketConfig
from .policies import LinearFeedbackPolicy, OpenLoopPolicy

FORMAT_VERSION = 1
LOG_COLUMNS = ("iteration", "agent", "mean_utility", "lr")


class ProfileFormatError(DynOligoError):
    code = "PROFILE_FORMAT"


@dataclass
class SavedProfile:
    kind: str
    config: MarketConfig
    arrays: dict
    meta: dict = field(default_factory=dict)

    def policies(self, mode: str = "mode") -> list:
        n = self.config.n_agents
        if self.kind == "open_loop":
            return [OpenLoopPolicy(i, self.arrays["prices"][:, i]) for i in range(n)]
        if self.kind == "linear_feedback":
            l1, l2 = self.arrays["lambda1"], self.arrays["lambda2"]
            return [LinearFeedbackPolicy(i, l1[:, i], l2[:, i], self.config) for i in range(n)]
        actor = self.arrays["actor"]
        return [NetworkPolicy(actor, i, self.config, mode) for i in range(n)]


def _network_from(shapes, members: int, flat: np.ndarray, dtype: str) -> StackedMLP:
    hidden = tuple(s[1] for s in shapes[:-1])
    dt = getattr(torch, dtype)
    net = StackedMLP(members, shapes[0][0], shapes[-1][1], hidden, dtype=dt)
    expected = sum(p.numel() for p in net.parameters())
    if flat.size != expected:
        raise ProfileFormatError(f"parameter vector has {flat.size} entries, layer shapes need {expected}")
    vector_to_parameters(torch.as_tensor(flat, dtype=dt), net.parameters())
    return net


def save_profile(path, profile, config: MarketConfig = None, **meta) -> Path:
    """Write a learned profile or an analytic equilibrium to ``path``."""
    path = Path(path)
    if isinstance(profile, LearnedProfile):
        config = profile.config
        meta.setdefault("algo", profile.train_config.algo)
        meta.setdefault("seed", profile.train_config.seed)
        actor = profile.actor
        dtype = str(next(actor.parameters()).dtype).removeprefix("torch.")
        arrays = dict(kind="network", members=actor.members, dtype=dtype,
                      layer_shapes=json.dumps(actor.layer_shapes()),
                      params=parameters_to_vector(actor.parameters()).detach().double().numpy())
    elif isinstance(profile, OpenLoopEquilibrium):
        if config is None:
            raise ValueError("open-loop equilibria need the config they were solved for")
        arrays = dict(kind="open_loop", prices=profile.prices)
    elif isinstance(profile, LinearFeedbackEquilibrium):
        config = profile.config
        arrays = dict(kind="linear_feedback", lambda1=profile.lambda1, lambda2=profile.lambda2)
    else:
        raise TypeError(f"cannot serialize {type(profile).__name__}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, format_version=FORMAT_VERSION, config=json.dumps(config.to_dict()),
                 config_hash=config.config_hash(), meta=json.dumps(meta), **arrays)
    return path


def load_profile(path, expect_config: MarketConfig = None) -> SavedProfile:
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    version = int(data.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise ProfileFormatError(f"unsupported profile format version {version}")
    config = MarketConfig.from_dict(json.loads(str(data["config"])))
    if str(data["config_hash"]) != config.config_hash():
        raise ProfileFormatError("stored config hash does not match the stored config")
    if expect_config is not None and expect_config.config_hash() != config.config_hash():
        raise ConfigMismatch("profile was produced for a different market config")
    kind = str(data["kind"])
    meta = json.loads(str(data["meta"]))
    if kind == "network":
        shapes = json.loads(str(data["layer_shapes"]))
        arrays = {"actor": _network_from(shapes, int(data["members"]), data["params"], str(data["dtype"]))}
    elif kind == "open_loop":
        arrays = {"prices": data["prices"]}
    elif kind == "linear_feedback":
        arrays = {"lambda1": data["lambda1"], "lambda2": data["lambda2"]}
    else:
        raise ProfileFormatError(f"unknown profile kind {kind!r}")
    return SavedProfile(kind, config, arrays, meta)


def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(log)


def read_training_log(path) -> list:
    with open(path, newline="") as fh:
        return [{"iteration": int(r["iteration"]), "agent": int(r["agent"]),
                 "mean_utility": float(r["mean_utility"]), "lr": float(r["lr"])}
                for r in csv.DictReader(fh)]
