"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GSL1"  u16 version  u32 record_count
    record*: u32 name_len | name (utf-8) | u8 dtype tag | u8 ndim | u64 dims[ndim]
             | u64 payload_len | payload | u32 crc32(record bytes before the crc)
    b"END!"  u32 record_count

Dtype tags: ``f`` float64, ``u`` uint64, ``i`` int64, ``j`` utf-8 JSON text
(ndim 0).  A truncated or altered file fails its checksum or the trailer
check and raises :class:`CheckpointError`.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .latent import rng_from_state_array, rng_state_array
from .spectral import SpectralState

MAGIC = b"GSL1"
TRAILER = b"END!"
VERSION = 1

_DTYPES = {"f": np.dtype("<f8"), "u": np.dtype("<u8"), "i": np.dtype("<i8")}


class CheckpointError(IOError):
    pass


def write_records(path, records: Dict[str, object]) -> None:
    """Write ``{name: ndarray | dict}`` records; dicts are stored as JSON."""
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(records))
    for name, value in records.items():
        rec = bytearray()
        nb = name.encode("utf-8")
        rec += struct.pack("<I", len(nb)) + nb
        if isinstance(value, (dict, list, str)):
            payload = json.dumps(value, sort_keys=True).encode("utf-8")
            rec += struct.pack("<BB", ord("j"), 0)
        else:
            arr = np.asarray(value)
            if arr.dtype.kind == "f":
                tag = "f"
            elif arr.dtype.kind == "u":
                tag = "u"
            elif arr.dtype.kind in "ib":
                tag = "i"
            else:
                raise CheckpointError(f"record {name}: unsupported dtype {arr.dtype}")
            arr = np.asarray(arr, dtype=_DTYPES[tag], order="C")  # ascontiguousarray would promote 0-d to 1-d
            rec += struct.pack("<BB", ord(tag), arr.ndim)
            rec += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            payload = arr.tobytes()
        rec += struct.pack("<Q", len(payload)) + payload
        rec += struct.pack("<I", zlib.crc32(rec) & 0xFFFFFFFF)
        out += rec
    out += TRAILER + struct.pack("<I", len(records))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def read_records(path) -> Dict[str, object]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GSL1 checkpoint")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos = 10
    records: Dict[str, object] = {}
    try:
        for _ in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (plen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            payload = buf[pos:pos + plen]
            if len(payload) != plen:
                raise CheckpointError(f"{path}: truncated record {name!r}")
            pos += plen
            (crc,) = struct.unpack_from("<I", buf, pos)
            if zlib.crc32(buf[start:pos]) & 0xFFFFFFFF != crc:
                raise CheckpointError(f"{path}: checksum mismatch in record {name!r}")
            pos += 4
            tag = chr(tag)
            if tag == "j":
                records[name] = json.loads(payload.decode("utf-8"))
            elif tag in _DTYPES:
                records[name] = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape).copy()
            else:
                raise CheckpointError(f"{path}: unknown dtype tag {tag!r}")
        if buf[pos:pos + 4] != TRAILER or struct.unpack_from("<I", buf, pos + 4)[0] != count:
            raise CheckpointError(f"{path}: missing trailer (file truncated?)")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# training state <-> records
# ---------------------------------------------------------------------------

def _put_states(rec: dict, prefix: str, states: Dict[str, SpectralState]) -> None:
    for name, st in states.items():
        rec[f"{prefix}.{name}.u"] = st.u
        rec[f"{prefix}.{name}.v"] = st.v
        rec[f"{prefix}.{name}.sigma"] = st.sigma


def _get_states(rec: dict, prefix: str) -> Dict[str, SpectralState]:
    out = {}
    tail = ".sigma"
    for key in rec:
        if key.startswith(prefix + ".") and key.endswith(tail):
            name = key[len(prefix) + 1:-len(tail)]
            out[name] = SpectralState(rec[f"{prefix}.{name}.u"].copy(), rec[f"{prefix}.{name}.v"].copy(),
                                      rec[key].copy())
    return out


def save_checkpoint(state, path, ema_standing: Optional[list] = None) -> None:
    """Serialize a :class:`~gslab.training.TrainState`."""
    rec: Dict[str, object] = {}
    cfg = state.config
    rec["meta"] = {
        "step": state.step,
        "d_updates": state.d_updates,
        "g_updates": state.g_updates,
        "freeze": state.freeze,
        "lr_g": state.lr_g,
        "lr_d": state.lr_d,
        "d_steps": state.d_steps,
        "hinge_margin": state.hinge_margin,
        "provenance": state.provenance,
        "config": cfg.snapshot_text(),
        "config_hash": cfg.config_hash(),
    }
    for net in (state.G, state.D):
        for name, p in net.params.items():
            rec[f"param.{name}"] = p.data
    for tag, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        rec[f"{tag}.t"] = np.array(opt.t, dtype=np.int64)
        for name in opt.m:
            rec[f"{tag}.m.{name}"] = opt.m[name]
            rec[f"{tag}.v.{name}"] = opt.v[name]
    for name, s in state.ema.shadow.items():
        rec[f"ema.{name}"] = s
    for i, bn in enumerate(state.G.bns):
        for attr in ("running_mean", "running_var", "standing_mean", "standing_var"):
            val = getattr(bn, attr)
            if val is not None:
                rec[f"bn{i}.{attr}"] = val
    if ema_standing is not None:
        for i, (m, v) in enumerate(ema_standing):
            rec[f"ema_bn{i}.standing_mean"] = m
            rec[f"ema_bn{i}.standing_var"] = v
    _put_states(rec, "sn_g", state.G.sn_states)
    _put_states(rec, "sn_d", state.D.sn_states)
    _put_states(rec, "cond", state.cond_states)
    _put_states(rec, "mon", state.monitor_states)
    for name, rng in state.rngs.items():
        rec[f"rng.{name}"] = rng_state_array(rng)
    if state.monitor_rng is not None:
        rec["rng.MONITOR"] = rng_state_array(state.monitor_rng)
    if state.train_set is not None:
        rec["train_set.x"] = state.train_set[0]
        rec["train_set.y"] = np.asarray(state.train_set[1], dtype=np.int64)
    write_records(path, rec)


def load_checkpoint(path):
    """Rebuild a :class:`~gslab.training.TrainState` from a checkpoint file."""
    rec = read_records(path)
    try:
        return _restore(path, rec)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing record {exc.args[0]!r}") from None


def _restore(path, rec):
    from .config import loads
    from .training import TrainState

    if "meta" not in rec:
        raise CheckpointError(f"{path}: missing meta record")
    meta = rec["meta"]
    cfg = loads(meta["config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    state = TrainState(cfg)
    for net in (state.G, state.D):
        for name, p in net.params.items():
            key = f"param.{name}"
            if key not in rec or rec[key].shape != p.data.shape:
                raise CheckpointError(f"{path}: missing or misshapen parameter {name}")
            p.data = rec[key].copy()
    for tag, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        opt.t = int(rec[f"{tag}.t"].item())
        for name in opt.m:
            opt.m[name] = rec[f"{tag}.m.{name}"].copy()
            opt.v[name] = rec[f"{tag}.v.{name}"].copy()
    for name in state.ema.shadow:
        state.ema.shadow[name] = rec[f"ema.{name}"].copy()
    for i, bn in enumerate(state.G.bns):
        for attr in ("running_mean", "running_var", "standing_mean", "standing_var"):
            key = f"bn{i}.{attr}"
            setattr(bn, attr, rec[key].copy() if key in rec else None)
    standing = []
    i = 0
    while f"ema_bn{i}.standing_mean" in rec:
        standing.append((rec[f"ema_bn{i}.standing_mean"], rec[f"ema_bn{i}.standing_var"]))
        i += 1
    state.ema_standing = standing or None
    state.G.sn_states = _get_states(rec, "sn_g")
    state.D.sn_states = _get_states(rec, "sn_d")
    state.cond_states = _get_states(rec, "cond")
    state.monitor_states = _get_states(rec, "mon")
    for name in list(state.rngs):
        state.rngs[name] = rng_from_state_array(rec[f"rng.{name}"])
    if "rng.MONITOR" in rec:
        state.monitor_rng = rng_from_state_array(rec["rng.MONITOR"])
    if "train_set.x" in rec:
        state.train_set = (rec["train_set.x"], rec["train_set.y"])
    state.step = int(meta["step"])
    state.d_updates = int(meta["d_updates"])
    state.g_updates = int(meta["g_updates"])
    state.lr_g = float(meta["lr_g"])
    state.lr_d = float(meta["lr_d"])
    state.d_steps = int(meta["d_steps"])
    state.hinge_margin = float(meta["hinge_margin"])
    state.provenance = dict(meta.get("provenance") or {})
    state.set_freeze(meta["freeze"])
    return state
