"""Versioned binary checkpoints: magic, config text, state JSON, f64 blocks."""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import RunConfig
from .nn import PotentialNetwork
from .optim import AdamState
from .ot_core import TrainState

MAGIC = b"ENOTCKP1"
FORMAT_VERSION = 1
_BLOCKS = ("f_params", "g_params", "opt_f_m", "opt_f_v", "opt_g_m", "opt_g_v")


class CorruptCheckpoint(Exception):
    pass


def _write_block(fh, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptCheckpoint("truncated checkpoint")
    return data


def _read_block(fh) -> np.ndarray:
    (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
    if nbytes % 8 != 0 or nbytes > 1 << 40:
        raise CorruptCheckpoint("implausible block length")
    return np.frombuffer(_read_exact(fh, nbytes), dtype="<f8").astype(np.float64)


def save_checkpoint(path, run_config: RunConfig, state: TrainState) -> None:
    meta = {
        "step": state.step,
        "status": state.status,
        "f_widths": state.f.layer_widths,
        "g_widths": state.g.layer_widths,
        "f_activation": state.f.activation,
        "g_activation": state.g.activation,
        "opt_f": {"step": state.opt_f.step, "beta1": state.opt_f.beta1,
                  "beta2": state.opt_f.beta2, "eps": state.opt_f.eps},
        "opt_g": {"step": state.opt_g.step, "beta1": state.opt_g.beta1,
                  "beta2": state.opt_g.beta2, "eps": state.opt_g.eps},
        # batch streams are keyed by step, so the counters to resume from
        # are derivable; stored explicitly for self-description
        "prng": {"next_stream_offset": state.step + 1},
        "blocks": list(_BLOCKS),
    }
    config_blob = run_config.to_ini_text().encode("utf-8")
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        for arr in (state.f.params, state.g.params,
                    state.opt_f.m, state.opt_f.v,
                    state.opt_g.m, state.opt_g.v):
            _write_block(fh, arr)


def load_checkpoint(path):
    """Returns (run_config, train_state); raises CorruptCheckpoint."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot open {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CorruptCheckpoint("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CorruptCheckpoint(f"unsupported format version {version}")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        config_text = _read_exact(fh, n).decode("utf-8")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            meta = json.loads(_read_exact(fh, n).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"bad state metadata: {exc}") from exc
        try:
            run_config = RunConfig.from_ini_text(config_text)
        except Exception as exc:
            raise CorruptCheckpoint(f"bad embedded config: {exc}") from exc
        blocks = {name: _read_block(fh) for name in meta.get("blocks", _BLOCKS)}
        if fh.read(1):
            raise CorruptCheckpoint("trailing bytes after final block")
    try:
        f = PotentialNetwork(meta["f_widths"], meta["f_activation"],
                             blocks["f_params"])
        g = PotentialNetwork(meta["g_widths"], meta["g_activation"],
                             blocks["g_params"])
        opt_f = AdamState(blocks["opt_f_m"], blocks["opt_f_v"],
                          meta["opt_f"]["step"], meta["opt_f"]["beta1"],
                          meta["opt_f"]["beta2"], meta["opt_f"]["eps"])
        opt_g = AdamState(blocks["opt_g_m"], blocks["opt_g_v"],
                          meta["opt_g"]["step"], meta["opt_g"]["beta1"],
                          meta["opt_g"]["beta2"], meta["opt_g"]["eps"])
        state = TrainState(f, g, opt_f, opt_g, meta["step"], meta["status"])
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"inconsistent checkpoint contents: {exc}") from exc
    return run_config, state
