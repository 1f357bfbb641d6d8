"""Parameter containers shared by the embedding and reconstruction nets."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .formats import load_checkpoint, save_checkpoint


class ParamStore:
    """Ordered mapping of parameter name to trainable Tensor."""

    def __init__(self):
        self.params: dict[str, nc.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> nc.Tensor:
        t = nc.Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def linear(self, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(n_in)
        self.add(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.add(f"{name}.b", np.zeros(n_out))

    def norm(self, name: str, d: int) -> None:
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def __getitem__(self, name: str) -> nc.Tensor:
        return self.params[name]

    def values(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None


def dense(x: nc.Tensor, store: ParamStore, name: str) -> nc.Tensor:
    return nc.add(nc.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def norm(x: nc.Tensor, store: ParamStore, name: str) -> nc.Tensor:
    return nc.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def config_tensors(cfg: dict[str, float]) -> dict[str, np.ndarray]:
    return {f"config.{k}": np.array(float(v)) for k, v in cfg.items()}


def split_config(state: dict[str, np.ndarray]) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    cfg = {k[len("config."):]: float(v) for k, v in state.items() if k.startswith("config.")}
    params = {k: v for k, v in state.items() if not k.startswith(("config.", PROVENANCE))}
    return cfg, params


# provenance travels in a tensor *name*; the value is a dummy scalar
PROVENANCE = "provenance."


def provenance_tensor(key: str, value: str) -> dict[str, np.ndarray]:
    return {f"{PROVENANCE}{key}={value}": np.array(0.0)}


def read_provenance(state: dict[str, np.ndarray]) -> dict[str, str]:
    out = {}
    for name in state:
        if name.startswith(PROVENANCE) and "=" in name:
            k, v = name[len(PROVENANCE):].split("=", 1)
            out[k] = v
    return out


__all__ = ["ParamStore", "dense", "norm", "config_tensors", "split_config", "save_checkpoint",
           "load_checkpoint", "provenance_tensor", "read_provenance"]
