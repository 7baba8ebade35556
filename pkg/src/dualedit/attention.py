"""Dual-branch self-attention sharing between the source and editing branches."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .denoiser import attention
from .errors import ConfigurationError, InvalidArgument


class ShareMode(str, Enum):
    Q_SHARE = "structure"
    KV_SHARE = "nonrigid"

    @property
    def trainable(self) -> tuple[str, ...]:
        # the projections left live in the editing branch are the ones tuned
        return ("k", "v") if self is ShareMode.Q_SHARE else ("q",)

    @property
    def shared(self) -> tuple[str, ...]:
        return ("q",) if self is ShareMode.Q_SHARE else ("k", "v")

    @classmethod
    def parse(cls, value) -> "ShareMode":
        if isinstance(value, ShareMode):
            return value
        value = str(value).lower()
        for m in cls:
            if value in (m.value, m.name.lower()):
                return m
        raise InvalidArgument(f"unknown share mode {value!r}")


def default_shared_layers(n_sites: int) -> frozenset[int]:
    """Deepest sites: 6 of 16 on an SD-sized backend, half of them on smaller ones."""
    k = min(6, n_sites // 2)
    return frozenset(range(n_sites - k, n_sites))


@dataclass(frozen=True)
class ShareConfig:
    mode: ShareMode = ShareMode.Q_SHARE
    shared_layers: frozenset = frozenset()
    # inclusive (first, last) sampling steps; None disables sharing
    step_window: tuple[int, int] | None = (5, 50)

    def __post_init__(self):
        object.__setattr__(self, "mode", ShareMode.parse(self.mode))
        object.__setattr__(self, "shared_layers", frozenset(int(i) for i in self.shared_layers))
        if self.step_window is not None:
            object.__setattr__(self, "step_window", (int(self.step_window[0]), int(self.step_window[1])))

    @classmethod
    def default(cls, mode, backend, S: int, start_step: int = 5) -> "ShareConfig":
        return cls(mode, default_shared_layers(len(backend.sites)), (start_step, S) if start_step <= S else None)

    def active_steps(self) -> frozenset[int]:
        if self.step_window is None:
            return frozenset()
        lo, hi = self.step_window
        return frozenset(range(lo, hi + 1))

    def grid(self) -> frozenset[tuple[int, int]]:
        return frozenset((s, l) for s in self.active_steps() for l in self.shared_layers)

    def validate(self, backend, S: int) -> None:
        sites = {s.layer_index for s in backend.sites}
        if not self.shared_layers <= sites:
            raise ConfigurationError(f"shared layers {sorted(self.shared_layers - sites)} not in backend")
        if self.step_window is not None:
            lo, hi = self.step_window
            if lo > hi:
                raise ConfigurationError(f"empty step window {self.step_window}; use None")
            if lo < 1 or hi > S:
                raise ConfigurationError(f"step window {self.step_window} outside [1, {S}]")

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "layers": sorted(self.shared_layers),
                "step_window": list(self.step_window) if self.step_window else None}

    @classmethod
    def from_dict(cls, d: dict) -> "ShareConfig":
        w = d.get("step_window")
        return cls(ShareMode.parse(d["mode"]), frozenset(d["layers"]), tuple(w) if w else None)


class SourceFeatureCache:
    """Per-(step, layer) source-branch Q/K/V plus the clean source latent.

    Writable only until :meth:`freeze`; afterwards every write raises.
    """

    def __init__(self, grid=frozenset()):
        self.grid = frozenset(grid)
        self._feats: dict = {}
        self._z0 = None
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_writable(self):
        if self._frozen:
            raise ConfigurationError("source feature cache is immutable after the reconstruction pass")

    def record(self, step: int, layer: int, q, k, v) -> None:
        self._check_writable()
        self._feats[(step, layer)] = {n: t.detach().clone() for n, t in (("q", q), ("k", k), ("v", v))}

    @property
    def z0(self):
        return self._z0

    @z0.setter
    def z0(self, value):
        self._check_writable()
        self._z0 = value.detach().clone()

    def freeze(self) -> "SourceFeatureCache":
        if set(self._feats) != set(self.grid):
            missing = sorted(set(self.grid) - set(self._feats))
            raise ConfigurationError(f"cache does not cover the share grid; missing {missing[:5]}")
        self._frozen = True
        return self

    def __setitem__(self, key, value):
        self._check_writable()
        self._feats[key] = value

    def __delitem__(self, key):
        self._check_writable()
        del self._feats[key]

    def __getitem__(self, key) -> dict:
        try:
            return self._feats[key]
        except KeyError:
            raise ConfigurationError(f"no cached source features for (step, layer) = {key}") from None

    def __contains__(self, key) -> bool:
        return key in self._feats

    def keys(self):
        return frozenset(self._feats)

    def __len__(self):
        return len(self._feats)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self._feats):
            for name in ("q", "k", "v"):
                h.update(repr((key, name)).encode())
                h.update(self._feats[key][name].detach().cpu().numpy().tobytes())
        if self._z0 is not None:
            h.update(self._z0.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        arrays = {f"step{s}/layer{l}/{n}": t.cpu().numpy()
                  for (s, l), feats in self._feats.items() for n, t in feats.items()}
        if self._z0 is not None:
            arrays["z0"] = self._z0.cpu().numpy()
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SourceFeatureCache":
        cache = cls()
        with np.load(path) as data:
            for name in data.files:
                if name == "z0":
                    cache._z0 = torch.from_numpy(data[name].copy())
                    continue
                s, l, n = name.split("/")
                key = (int(s[4:]), int(l[5:]))
                cache._feats.setdefault(key, {})[n] = torch.from_numpy(data[name].copy())
        cache.grid = frozenset(cache._feats)
        cache._frozen = True
        return cache


def attend_shared(x, source_feats: dict, site, mode: ShareMode):
    """Editing-branch attention at a shared site.

    Q_SHARE: softmax(Q_s K_t^T / sqrt d) V_t.  KV_SHARE: softmax(Q_t K_s^T / sqrt d) V_s.
    Live projections use the site's target clones.
    """
    mode = ShareMode.parse(mode)
    live = {}
    for name in ("q", "k", "v"):
        if name in mode.shared:
            live[name] = source_feats[name]
        else:
            live[name] = site.project(x, name, target=True)
    for name in mode.shared:
        cached = source_feats[name]
        expect = (site.head_count, x.shape[1], site.key_dim)
        if tuple(cached.shape[1:]) != expect:
            raise ConfigurationError(
                f"site {site.layer_index}: cached {name} has shape {tuple(cached.shape)}, live needs (*, {expect})")
    return attention(live["q"], live["k"], live["v"])


class RecordingControl:
    """Source-branch hook: stores frozen Q/K/V on the share grid, output unchanged."""

    def __init__(self, cfg: ShareConfig, cache: SourceFeatureCache):
        self.cfg = cfg
        self.cache = cache
        self.layers = frozenset(cfg.shared_layers)
        self.active = cfg.active_steps()
        self.step = 0

    def __call__(self, site, x):
        q, k, v = site.project(x, "q"), site.project(x, "k"), site.project(x, "v")
        if self.step in self.active:
            # the conditional pass is last in a guided batch
            self.cache.record(self.step, site.layer_index, q[-1:], k[-1:], v[-1:])
        return attention(q, k, v)


@dataclass
class ShareControl:
    """Editing-branch hook set: shared attention on the grid, clone attention elsewhere."""

    cfg: ShareConfig
    cache: SourceFeatureCache
    layers: frozenset
    step: int = 0
    trace: list | None = None
    active: frozenset = field(default_factory=frozenset)

    def __call__(self, site, x):
        if site.layer_index in self.cfg.shared_layers and self.step in self.active:
            feats = self.cache[(self.step, site.layer_index)]
            if self.trace is not None:
                self.trace.append((self.step, site.layer_index, feats))
            return attend_shared(x, feats, site, self.cfg.mode)
        return site.vanilla(x, target=True)


def install_share_hooks(backend, cfg: ShareConfig, cache: SourceFeatureCache) -> ShareControl:
    missing = cfg.grid() - cache.keys()
    if missing:
        raise ConfigurationError(f"cache lacks entries for {sorted(missing)[:5]}")
    for site in backend.sites:
        if site.q_t is None:
            site.reset_clones()
    return ShareControl(cfg, cache, frozenset(s.layer_index for s in backend.sites),
                        active=cfg.active_steps())
