"""Finite-difference verification of tape gradients.

Central differences with a small symmetric step give an O(eps^2) estimate of
each partial derivative; any analytic/numeric mismatch above tolerance is
reported per coordinate. Full sweeps are quadratic in parameter count, so
large parameters can be spot-checked on a deterministic sample of
coordinates instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import make_rng
from .tensor import Tape, Tensor


@dataclass
class CoordinateFailure:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    ok: bool
    max_rel_error: float
    checked: int
    failures: list[CoordinateFailure] = field(default_factory=list)

    def summary(self) -> str:
        status = "OK" if self.ok else "FAIL"
        return (
            f"grad check {status}: {self.checked} coordinates, "
            f"max rel error {self.max_rel_error:.3e}, {len(self.failures)} failures"
        )


def _rel_error(a: float, n: float) -> float:
    # Unit floor in the denominator: for gradients of order 1 this is a
    # relative test, for near-zero gradients it degrades to absolute and
    # avoids 0/0 blowups.
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_coords_per_param: int | None = None,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic and must read the current ``data`` of
    every tensor in ``params`` each time it is called. With
    ``max_coords_per_param`` set, at most that many coordinates per parameter
    are probed, chosen by a seeded draw so reruns check the same ones.
    """
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
        analytic = {name: tape.grad(p).copy() for name, p in params.items()}

    failures: list[CoordinateFailure] = []
    max_err = 0.0
    checked = 0
    for name, p in sorted(params.items()):
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if max_coords_per_param is not None and n_coords > max_coords_per_param:
            rng = make_rng(sample_seed, len(name), n_coords)
            coords = rng.choice(n_coords, size=max_coords_per_param, replace=False)
            coords = np.sort(coords)
        else:
            coords = np.arange(n_coords)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            plus = loss_fn().item()
            flat[c] = original - eps
            minus = loss_fn().item()
            flat[c] = original
            numeric = (plus - minus) / (2.0 * eps)
            err = _rel_error(float(a_flat[c]), numeric)
            checked += 1
            if err > max_err:
                max_err = err
            if err > tol:
                failures.append(CoordinateFailure(
                    param=name,
                    index=np.unravel_index(int(c), p.shape),
                    analytic=float(a_flat[c]),
                    numeric=numeric,
                    rel_error=err,
                ))
    return GradCheckReport(
        ok=not failures,
        max_rel_error=max_err,
        checked=checked,
        failures=failures,
    )


def standard_suite(
    eps: float = 1e-5,
    tol: float = 1e-5,
    seed: int = 0,
    composition_coords: int | None = 4,
) -> list[tuple[str, GradCheckReport]]:
    """Gradient checks for every differentiable operation family plus the
    full three-stream model composition at default model dimensions.

    Each family builds a small scalar loss exercising one group of tape
    operations, with inputs registered as parameters so both weight- and
    activation-side gradients are probed. Operation families are swept
    exhaustively. The composition check runs the default-size model end to
    end and probes ``composition_coords`` coordinates per parameter tensor
    (None sweeps every coordinate — slow at default widths).
    """
    from . import tensor as T

    rng = make_rng(seed, 0xF00D)

    def t(*shape: int) -> Tensor:
        return Tensor(rng.uniform(-1.0, 1.0, shape))

    suite: list[tuple[str, GradCheckReport]] = []

    def run(name: str, params: dict[str, Tensor], loss_fn,
            coords: int | None = None) -> None:
        suite.append((name, grad_check(loss_fn, params, eps=eps, tol=tol,
                                       max_coords_per_param=coords,
                                       sample_seed=seed)))

    a, b, w = t(3, 4), t(3, 4), t(3, 4)
    run("add_sub_scale", {"a": a, "b": b},
        lambda: T.mean_all(T.add(T.scale(a, 1.7), T.sub(b, a))))
    run("mul", {"a": a, "b": b}, lambda: T.mean_all(T.mul(a, b)))

    m1, m2 = t(3, 4), t(4, 2)
    run("matmul", {"m1": m1, "m2": m2},
        lambda: T.mean_all(T.matmul(m1, m2)))

    m3, flat = t(3, 2), t(12)
    run("transpose_reshape", {"m3": m3, "flat": flat},
        lambda: T.mean_all(T.matmul(T.transpose(m3),
                                    T.reshape(flat, (3, 4)))))

    table, v, sel = t(6, 3), t(3), t(6, 3)
    def rows_loss():
        g = T.gather_rows(table, [0, 2, 4, 2])
        s = T.col_slice(T.row_slice(g, 1, 4), 0, 2)
        st = T.stack_rows([T.row(s, 0), T.row(s, 2)])
        rep = T.replace_rows(g, [0, 3], v)
        joined = T.concat_cols([rep, T.mul(g, T.gather_rows(sel, [0, 2, 4, 2]))])
        return T.add(T.mean_all(st), T.mean_all(joined))
    run("row_col_assembly", {"table": table, "v": v, "sel": sel}, rows_loss)

    x1, w1 = t(3, 5), t(3, 5)
    run("softmax_rows", {"x1": x1, "w1": w1},
        lambda: T.mean_all(T.mul(T.softmax_rows(x1), w1)))

    x2, gamma, beta, w2 = t(3, 5), t(5), t(5), t(3, 5)
    run("layer_norm", {"x2": x2, "gamma": gamma, "beta": beta},
        lambda: T.mean_all(T.mul(T.layer_norm(x2, gamma, beta), w2)))

    x3, w3 = t(3, 5), t(3, 5)
    run("gelu", {"x3": x3}, lambda: T.mean_all(T.mul(T.gelu(x3), w3)))

    sig, cw, cb, mixer = t(10, 2), t(6, 3), t(3), t(3, 3)
    run("conv1d", {"sig": sig, "cw": cw, "cb": cb},
        lambda: T.mean_all(T.matmul(T.conv1d(sig, cw, cb, kernel=3, stride=2),
                                    mixer)))

    pool_a, pool_b = t(4, 3), t(4, 3)
    run("mean_pooling", {"pool_a": pool_a, "pool_b": pool_b},
        lambda: T.mean_all(T.stack_rows([T.mean_rows(pool_a),
                                         T.mean_rows(pool_b)])))

    lx, lw = t(4), t(4, 3)
    run("cross_entropy", {"lx": lx, "lw": lw},
        lambda: T.cross_entropy_logits(
            T.reshape(T.matmul(T.reshape(lx, (1, 4)), lw), (3,)), 1))

    suite.append(("full_composition",
                  _composition_check(eps, tol, seed, composition_coords)))
    return suite


def _composition_check(eps: float, tol: float, seed: int,
                       coords: int | None) -> GradCheckReport:
    """Whole-model check: all three encoders, fusion, classifier, loss."""
    from .config import ModelConfig
    from .encoders import (AudioWaveform, TokenSequence, VisualFrame,
                           encode_audio, encode_text, encode_visual)
    from .fusion import CmtModel
    from . import tensor as T

    cfg = ModelConfig(dropout=0.0)
    model = CmtModel.init(cfg, seed=seed)
    rng = make_rng(seed, 0xC0FFEE)
    frame = VisualFrame(rng.random((cfg.image_height, cfg.image_width,
                                    cfg.image_channels)))
    wave = AudioWaveform(rng.uniform(-1, 1, cfg.audio_samples),
                         cfg.sample_rate)
    tokens = TokenSequence([0] + [
        int(x) for x in rng.integers(1, cfg.vocab_size, cfg.max_text_len - 1)])

    def loss_fn() -> Tensor:
        zv = encode_visual(frame, model.params, cfg)
        za = encode_audio(wave, model.params, cfg)
        zt = encode_text(tokens, model.params, cfg)
        dist = model.forward_fused(zv, za, zt)
        return T.cross_entropy_logits(dist.logits, 1)

    return grad_check(loss_fn, model.params, eps=eps, tol=tol,
                      max_coords_per_param=coords, sample_seed=seed)
