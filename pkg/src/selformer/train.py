"""Cross-entropy training with decoupled-weight-decay Adam, seeded epoch
loops with JSONL logging, batched prediction, and the finite-difference
gradient-check harness used by tests and the CLI."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .ksa import KstbParams, kstb_forward
from .tensor import (
    ConvSpec,
    NumericsError,
    Tensor,
    build,
    conv2d,
    conv3d,
    no_grad,
    ops,
    parameter,
    zero_grads,
)
from .tsa import TstbParams, tsa_forward, tstb_forward


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0   # epochs between intermediate checkpoints; 0 = final only

    def __post_init__(self):
        # lr = 0 is legal: it freezes the parameters, which tests rely on
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam moment settings")


class AdamW:
    """Adam with decoupled multiplicative weight decay applied before the
    bias-corrected moment update."""

    def __init__(self, tensors: list[Tensor], config: TrainConfig):
        self.tensors = list(tensors)
        self.config = config
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.step_count = 0

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - cfg.beta1 ** t
        bias2 = 1.0 - cfg.beta2 ** t
        for p, m, v in zip(self.tensors, self.m, self.v):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay:
                p.data *= 1.0 - cfg.learning_rate * cfg.weight_decay
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            p.data -= cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of 0-based integer targets."""
    d = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if d.ndim != 2:
        raise ValueError(f"logits must be (B, K), got shape {d.shape}")
    if targets.shape != (d.shape[0],):
        raise ValueError(f"targets shape {targets.shape} != ({d.shape[0]},)")
    if targets.size and (targets.min() < 0 or targets.max() >= d.shape[1]):
        raise ValueError(
            f"targets must lie in [0, {d.shape[1]}), found "
            f"[{targets.min()}, {targets.max()}]"
        )
    n = d.shape[0]
    shifted = d - d.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    soft = expd / expd.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(expd.sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), targets].mean()

    def vjp(g):
        grad = soft.copy()
        grad[np.arange(n), targets] -= 1.0
        return grad * (g / n)

    return build(np.asarray(loss), (logits,), (vjp,))


def predict(params, config, cubes: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class indices (0-based) for a stack of patches."""
    out = np.empty(cubes.shape[0], dtype=np.int64)
    with no_grad():
        for start in range(0, cubes.shape[0], batch_size):
            chunk = cubes[start:start + batch_size]
            logits = model_mod.forward(Tensor(chunk), params, config)
            out[start:start + chunk.shape[0]] = np.argmax(logits.data, axis=1)
    return out


@dataclass
class TrainResult:
    log: list[dict]
    checkpoint_path: Path | None


def train_loop(params, model_config, train_config: TrainConfig,
               cubes: np.ndarray, targets: np.ndarray,
               run_dir=None) -> TrainResult:
    """Seeded mini-batch training; single-threaded and bit-reproducible.

    ``targets`` are 0-based class indices aligned with ``cubes``. When
    ``run_dir`` is given, per-epoch JSONL lines land in ``train_log.jsonl``
    and the final (plus every ``checkpoint_every``-th) state in
    ``checkpoint.bin``.
    """
    cubes = np.asarray(cubes, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if cubes.shape[0] != targets.shape[0]:
        raise ValueError(
            f"{cubes.shape[0]} patches but {targets.shape[0]} targets"
        )
    rng = np.random.default_rng(train_config.seed)
    optimizer = AdamW(params.tensors(), train_config)
    n = cubes.shape[0]
    log: list[dict] = []
    log_file = None
    checkpoint_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = (run_dir / "train_log.jsonl").open("w", encoding="utf-8")
        checkpoint_path = run_dir / "checkpoint.bin"
    try:
        for epoch in range(train_config.epochs):
            started = time.perf_counter()
            order = rng.permutation(n)
            loss_sum = 0.0
            hits = 0
            for start in range(0, n, train_config.batch_size):
                chosen = order[start:start + train_config.batch_size]
                batch = Tensor(cubes[chosen])
                logits = model_mod.forward(batch, params, model_config)
                loss = cross_entropy(logits, targets[chosen])
                zero_grads(params.tensors())
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * chosen.size
                hits += int(np.sum(np.argmax(logits.data, axis=1) == targets[chosen]))
            entry = {
                "epoch": epoch,
                "loss": loss_sum / n,
                "train_acc": hits / n,
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if (
                checkpoint_path is not None
                and train_config.checkpoint_every
                and (epoch + 1) % train_config.checkpoint_every == 0
            ):
                model_mod.save_checkpoint(checkpoint_path, params, model_config)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        model_mod.save_checkpoint(checkpoint_path, params, model_config)
    return TrainResult(log=log, checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# gradient-check harness
# ---------------------------------------------------------------------------

GRADCHECK_THRESHOLD = 1e-4


@dataclass
class GradCheckResult:
    module: str
    max_rel_err: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < GRADCHECK_THRESHOLD


def _relative_error(a: float, b: float, floor: float = 1e-2) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(make_output, named_tensors, rng: np.random.Generator,
                            coords_per_tensor: int = 8, h: float = 1e-4) -> tuple[float, int]:
    """Analytic backward vs central differences on sampled coordinates.

    ``make_output()`` must rebuild its result from the live ``named_tensors``
    each call; returns (max relative error, coordinates checked).
    """
    out = make_output()
    projection = rng.normal(size=out.shape)
    loss = ops.sum_all(ops.mul(out, Tensor(projection)))
    for _, t in named_tensors:
        t.grad = None
    loss.backward()

    def scalar() -> float:
        with no_grad():
            return float(np.sum(make_output().data * projection))

    worst = 0.0
    checked = 0
    for name, t in named_tensors:
        if t.grad is None:
            raise NumericsError(f"{name} received no gradient")
        flat = t.data.reshape(-1)
        grads = t.grad.reshape(-1)
        size = flat.size
        picks = (
            np.arange(size)
            if size <= coords_per_tensor
            else rng.choice(size, size=coords_per_tensor, replace=False)
        )
        for j in picks:
            original = flat[j]
            flat[j] = original + h
            f_plus = scalar()
            flat[j] = original - h
            f_minus = scalar()
            flat[j] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _relative_error(float(grads[j]), numeric))
            checked += 1
    return worst, checked


def _min_topk_margin(traces, k: float) -> float:
    worst = math.inf
    for t in traces:
        n = t.dense.shape[-1]
        m = ops.retained_count(k, n)
        if m >= n:
            continue
        ordered = np.sort(t.dense, axis=-1)[:, ::-1]
        worst = min(worst, float(np.min(ordered[:, m - 1] - ordered[:, m])))
    return worst


def _redraw(named_tensors, rng: np.random.Generator, scale=0.3, qkv_scale=0.7) -> None:
    # selection margins at the 0.02 training init are ~1e-5 wide; gradient
    # checks need an O(1) operating point
    for name, t in named_tensors:
        if name.endswith(".gain"):
            t.data[...] = 1.0 + rng.normal(scale=0.1, size=t.shape)
        elif "pconv" in name or "dwconv" in name:
            t.data[...] = rng.normal(scale=qkv_scale, size=t.shape)
        else:
            t.data[...] = rng.normal(scale=scale, size=t.shape)


def _op_cases(rng):
    def rnd(*shape, scale=1.0):
        return parameter(rng.normal(scale=scale, size=shape))

    cases = []

    def case(name, make, tensors):
        cases.append((name, make, [(f"arg{i}", t) for i, t in enumerate(tensors)]))

    x = rnd(3, 5, 5)
    case("op:sigmoid", lambda: ops.sigmoid(x), [x])
    x2 = rnd(3, 5, 5)
    case("op:gelu", lambda: ops.gelu(x2), [x2])
    a, b = rnd(2, 3, 4), rnd(4)
    case("op:add", lambda: ops.add(a, b), [a, b])
    c, d = rnd(2, 3, 4), rnd(3, 1)
    case("op:mul", lambda: ops.mul(c, d), [c, d])
    e = rnd(4, 4)
    case("op:scale", lambda: ops.scale(e, -2.5), [e])
    f = rnd(4, 3, 3)
    case("op:channel_pool_avg", lambda: ops.channel_pool(f, "avg"), [f])
    g = rnd(4, 3, 3)
    case("op:channel_pool_max", lambda: ops.channel_pool(g, "max"), [g])
    i = rnd(3, 4, 5)
    case("op:global_avg_pool", lambda: ops.global_avg_pool(i), [i])
    j = rnd(5, 7)
    case("op:softmax_rows", lambda: ops.softmax_rows(j), [j])
    ln_x, ln_g, ln_b = rnd(4, 3, 3), rnd(4), rnd(4)
    case("op:layer_norm", lambda: ops.layer_norm(ln_x, ln_g, ln_b), [ln_x, ln_g, ln_b])
    m1, m2 = rnd(2, 3, 4), rnd(2, 4, 3)
    case("op:matmul", lambda: ops.matmul(m1, m2), [m1, m2])
    fx, fw, fb = rnd(4, 3), rnd(3, 5), rnd(5)
    case("op:fully_connected", lambda: ops.fully_connected(fx, fw, fb), [fx, fw, fb])
    r = rnd(3, 4)
    case("op:reshape", lambda: ops.reshape(r, (2, 6)), [r])
    tr = rnd(2, 3, 4)
    case("op:transpose", lambda: ops.transpose(tr, (2, 0, 1)), [tr])
    c1, c2 = rnd(2, 3, 3), rnd(4, 3, 3)
    case("op:concat_channels", lambda: ops.concat_channels([c1, c2]), [c1, c2])
    nr = rnd(3, 6)
    case("op:narrow", lambda: ops.narrow(nr, -1, 1, 3), [nr])

    cx, cw, cb = rnd(3, 5, 5), rnd(4, 3, 3, 3, scale=0.5), rnd(4)
    spec_full = ConvSpec.same((3, 3))
    case("op:conv2d", lambda: conv2d(cx, cw, cb, spec_full), [cx, cw, cb])
    dx, dw = rnd(3, 6, 6), rnd(3, 1, 5, 5, scale=0.5)
    spec_dw = ConvSpec.same((5, 5), dilation=2, groups=3)
    case("op:conv2d_depthwise_dilated", lambda: conv2d(dx, dw, None, spec_dw), [dx, dw])
    sx, sw, sb = rnd(2, 4, 4), rnd(3, 2, 2, 2, scale=0.5), rnd(3)
    spec_strided = ConvSpec.strided((2, 2), 2)
    case("op:conv2d_strided", lambda: conv2d(sx, sw, sb, spec_strided), [sx, sw, sb])
    px, pw, pb = rnd(2, 3, 3, 3), rnd(6, 2, 1, 1, 1, scale=0.5), rnd(6)
    spec_p3 = ConvSpec.same((1, 1, 1))
    case("op:conv3d_pointwise", lambda: conv3d(px, pw, pb, spec_p3), [px, pw, pb])
    vx, vw = rnd(6, 2, 3, 3), rnd(6, 1, 1, 3, 3, scale=0.5)
    spec_d3 = ConvSpec.same((1, 3, 3), groups=6)
    case("op:conv3d_depthwise", lambda: conv3d(vx, vw, None, spec_d3), [vx, vw])

    # the selection op is checked jointly with its softmax at a wide-margin point
    for attempt in range(100):
        probe = np.random.default_rng(7000 + attempt).normal(scale=3.0, size=(4, 6))
        ordered = np.sort(probe, axis=-1)
        if np.min(np.abs(np.diff(ordered, axis=-1))) > 1e-2:
            break
    tk = parameter(probe)
    case(
        "op:topk_row_threshold",
        lambda: ops.softmax_rows(ops.topk_row_threshold(tk, 0.5)),
        [tk],
    )
    ce_x = rnd(5, 4)
    ce_t = np.random.default_rng(123).integers(0, 4, size=5)
    case("op:cross_entropy", lambda: cross_entropy(ce_x, ce_t), [ce_x])
    return cases


def _block_case_ksa(rng):
    p = KstbParams.create(4, 1, rng)
    named = p.parameters("kstb")
    _redraw(named, rng)
    x = parameter(rng.normal(size=(4, 3, 3)))
    return lambda: kstb_forward(x, p), [("input", x)] + named


def _block_case_tsa(rng, margin_threshold):
    p = TstbParams.create(8, 2, 2, 0.5, 1, rng)
    named = p.parameters("tstb")
    _redraw(named, rng)
    for attempt in range(500):
        candidate = rng.normal(size=(8, 2, 2))
        with no_grad():
            normed = ops.layer_norm(Tensor(candidate), p.ln1.gain, p.ln1.bias)
            _, traces = tsa_forward(normed, p.tsa, trace=True)
        if _min_topk_margin(traces, 0.5) > margin_threshold:
            x = parameter(candidate)
            return lambda: tstb_forward(x, p), [("input", x)] + named
    raise NumericsError("no margin-safe evaluation point for the token block")


def _model_case(rng, margin_threshold):
    config = model_mod.ModelConfig.tiny()
    params = model_mod.init_model(config, seed=int(rng.integers(1 << 30)))
    named = params.parameters()
    _redraw(named, rng)
    for attempt in range(500):
        candidate = rng.normal(
            size=(1, config.bands, config.patch_size, config.patch_size)
        )
        with no_grad():
            _, record = model_mod.forward(Tensor(candidate), params, config, trace=True)
        margin = min(
            (_min_topk_margin(traces, config.select_rate) for traces in record.attention),
            default=math.inf,
        )
        if margin > margin_threshold:
            x = parameter(candidate)
            return lambda: model_mod.forward(x, params, config), [("input", x)] + named
    raise NumericsError("no margin-safe evaluation point for the tiny model")


def run_gradcheck(seed: int = 0, coords_per_tensor: int = 8,
                  margin_threshold: float = 1e-2) -> list[GradCheckResult]:
    """Finite-difference checks for every op, both block types, and the tiny
    model. Evaluation points whose selection margin falls below the threshold
    are resampled."""
    rng = np.random.default_rng(seed)
    results = []
    for name, make, named in _op_cases(rng):
        err, n_coords = finite_difference_check(make, named, rng, coords_per_tensor)
        results.append(GradCheckResult(name, err, n_coords))

    make, named = _block_case_ksa(rng)
    err, n_coords = finite_difference_check(make, named, rng, coords_per_tensor)
    results.append(GradCheckResult("block:kernel_selective", err, n_coords))

    make, named = _block_case_tsa(rng, margin_threshold)
    err, n_coords = finite_difference_check(make, named, rng, coords_per_tensor)
    results.append(GradCheckResult("block:token_selective", err, n_coords))

    make, named = _model_case(rng, margin_threshold)
    err, n_coords = finite_difference_check(make, named, rng, coords_per_tensor)
    results.append(GradCheckResult("model:tiny", err, n_coords))
    return results


def format_gradcheck_report(results: list[GradCheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{status:4s} {r.module:32s} max_rel_err={r.max_rel_err:.3e} "
            f"coords={r.coords_checked}"
        )
    return "\n".join(lines)
