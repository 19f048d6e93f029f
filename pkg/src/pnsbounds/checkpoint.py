"""Versioned flat-binary checkpoints for trained estimators.

Layout (all little-endian):

    magic   b"PNSB"
    version u32
    kind    str          (u16 length + utf-8)
    index_dim u32        (0 unless the checkpoint carries a hypermodel)
    n_meta  u32          then per entry: key str, type u8, value
                         (type 0 -> i64, 1 -> f64, 2 -> str)
    n_arrays u32         then per entry: name str, ndim u8, dims u32...,
                         float64 row-major values

Byte output is deterministic for fixed inputs, which the reproducibility
checks rely on.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PNSB"
VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(buf, pos):
    (length,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return buf[pos : pos + length].decode("utf-8"), pos + length


def save_checkpoint(path, kind: str, arrays: dict, meta: dict, index_dim: int = 0):
    chunks = [MAGIC, struct.pack("<I", VERSION), _pack_str(kind),
              struct.pack("<I", index_dim), struct.pack("<I", len(meta))]
    for key in sorted(meta):
        value = meta[key]
        chunks.append(_pack_str(key))
        if isinstance(value, bool):
            raise TypeError("store booleans as ints in checkpoint meta")
        if isinstance(value, (int, np.integer)):
            chunks.append(struct.pack("<Bq", 0, int(value)))
        elif isinstance(value, (float, np.floating)):
            chunks.append(struct.pack("<Bd", 1, float(value)))
        elif isinstance(value, str):
            chunks.append(struct.pack("<B", 2) + _pack_str(value))
        else:
            raise TypeError(f"unsupported meta type for {key!r}: {type(value)}")
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not a pnsbounds checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    kind, pos = _read_str(buf, pos)
    (index_dim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    (n_meta,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = {}
    for _ in range(n_meta):
        key, pos = _read_str(buf, pos)
        (code,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        if code == 0:
            (value,) = struct.unpack_from("<q", buf, pos)
            pos += 8
        elif code == 1:
            (value,) = struct.unpack_from("<d", buf, pos)
            pos += 8
        elif code == 2:
            value, pos = _read_str(buf, pos)
        else:
            raise ValueError(f"bad meta type code {code}")
        meta[key] = value
    (n_arrays,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(n_arrays):
        name, pos = _read_str(buf, pos)
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += count * 8
        arrays[name] = arr.copy()
    return kind, index_dim, meta, arrays


def _hidden_str(widths) -> str:
    return ",".join(str(int(w)) for w in widths)


def _hidden_tuple(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v)


def save_estimator(path, est) -> None:
    """Write a fitted estimator to a checkpoint file."""
    from .anchored import AnchoredBoundsEstimator
    from .baselines import SLearnerBounds, TLearnerBounds
    from .bootstrap import MultiplierBootstrapBounds
    from .epinet import EpistemicBoundsEstimator

    common_meta = {
        "d_in": int(est.n_features_in_),
        "hidden_width": int(est.hidden_width),
        "depth": int(est.depth),
    }
    scaler_arrays = {"input_mean": est.scaler_.mean, "input_scale": est.scaler_.scale}
    if isinstance(est, EpistemicBoundsEstimator):
        meta = dict(
            common_meta,
            prior_scale=float(est.prior_scale),
            generator_hidden=_hidden_str(est.generator_hidden),
            prior_hidden=_hidden_str(est.prior_hidden),
            posterior_samples=int(est.posterior_samples),
            quantile_level=float(est.quantile_level),
        )
        arrays = dict(
            gen_params=est.hyper_.gen_params,
            prior_params=est.hyper_.prior_params,
            **scaler_arrays,
        )
        save_checkpoint(path, "enn", arrays, meta, index_dim=est.index_dim)
    elif isinstance(est, MultiplierBootstrapBounds):
        meta = dict(
            common_meta,
            mode=est.mode,
            n_bootstrap=int(est.n_bootstrap),
            alpha=float(est.alpha),
            cg_iters=int(est.cg_iters),
            damping=float(est.damping),
            seed=int(est.seed),
        )
        save_checkpoint(path, "mb", dict(params=est.params_, **scaler_arrays), meta)
    elif isinstance(est, AnchoredBoundsEstimator):
        save_checkpoint(path, "anchored", dict(params=est.params_, **scaler_arrays),
                        common_meta)
    elif isinstance(est, SLearnerBounds):
        arrays = dict(
            outcome_params=est.outcome_params_,
            joint_params=est.joint_params_,
            **scaler_arrays,
        )
        save_checkpoint(path, "s_learner", arrays, common_meta)
    elif isinstance(est, TLearnerBounds):
        arrays = dict(
            arm0_params=est.arm_params_[0],
            arm1_params=est.arm_params_[1],
            joint_params=est.joint_params_,
            **scaler_arrays,
        )
        save_checkpoint(path, "t_learner", arrays, common_meta)
    else:
        raise TypeError(f"cannot checkpoint {type(est).__name__}")


def load_estimator(path):
    """Reconstruct a fitted estimator from a checkpoint file.

    Multiplier-bootstrap checkpoints carry only the base network; influence
    caches are rebuilt from training data, so `refit_influence` must be
    called with the original training arrays before predicting intervals.
    """
    from .anchored import AnchoredBoundsEstimator, anchored_layout
    from .baselines import SLearnerBounds, TLearnerBounds, head_layout
    from .bootstrap import MultiplierBootstrapBounds
    from .epinet import EpistemicBoundsEstimator, init_hypermodel
    from .validation import Standardizer

    kind, index_dim, meta, arrays = load_checkpoint(path)
    scaler = Standardizer(mean=arrays["input_mean"], scale=arrays["input_scale"])
    d_in = int(meta["d_in"])
    width = int(meta["hidden_width"])
    depth = int(meta["depth"])
    if kind == "anchored":
        est = AnchoredBoundsEstimator(hidden_width=width, depth=depth)
        est.layout_ = anchored_layout(d_in, width, depth)
        est.params_ = arrays["params"]
        est.scaler_ = scaler
        est.n_features_in_ = d_in
        return est
    if kind == "enn":
        gen_hidden = _hidden_tuple(meta["generator_hidden"])
        prior_hidden = _hidden_tuple(meta["prior_hidden"])
        est = EpistemicBoundsEstimator(
            hidden_width=width,
            depth=depth,
            index_dim=index_dim,
            generator_hidden=gen_hidden,
            prior_hidden=prior_hidden,
            prior_scale=float(meta["prior_scale"]),
            posterior_samples=int(meta["posterior_samples"]),
            quantile_level=float(meta["quantile_level"]),
        )
        hyper = init_hypermodel(
            anchored_layout(d_in, width, depth),
            index_dim=index_dim,
            generator_hidden=gen_hidden,
            prior_hidden=prior_hidden,
            prior_scale=float(meta["prior_scale"]),
        )
        hyper.gen_params = arrays["gen_params"].copy()
        hyper.prior_params = arrays["prior_params"].copy()
        est.hyper_ = hyper
        est.scaler_ = scaler
        est.n_features_in_ = d_in
        return est
    if kind == "mb":
        est = MultiplierBootstrapBounds(
            mode=meta["mode"],
            n_bootstrap=int(meta["n_bootstrap"]),
            alpha=float(meta["alpha"]),
            cg_iters=int(meta["cg_iters"]),
            damping=float(meta["damping"]),
            hidden_width=width,
            depth=depth,
            seed=int(meta["seed"]),
        )
        est.layout_ = anchored_layout(d_in, width, depth)
        est.params_ = arrays["params"]
        est.scaler_ = scaler
        est.n_features_in_ = d_in
        return est
    if kind == "s_learner":
        est = SLearnerBounds(hidden_width=width, depth=depth)
        est.outcome_layout_ = head_layout(d_in + 1, width, depth, 1)
        est.outcome_params_ = arrays["outcome_params"]
        est.joint_layout_ = head_layout(d_in, width, depth, 4)
        est.joint_params_ = arrays["joint_params"]
        est.scaler_ = scaler
        est.n_features_in_ = d_in
        return est
    if kind == "t_learner":
        est = TLearnerBounds(hidden_width=width, depth=depth)
        est.arm_layout_ = head_layout(d_in, width, depth, 1)
        est.arm_params_ = {0: arrays["arm0_params"], 1: arrays["arm1_params"]}
        est.joint_layout_ = head_layout(d_in, width, depth, 4)
        est.joint_params_ = arrays["joint_params"]
        est.scaler_ = scaler
        est.n_features_in_ = d_in
        return est
    raise ValueError(f"unknown checkpoint kind {kind!r}")
