"""Finite-difference oracle for every layer and for small full models.

All checks run in float64 with central differences. The error of one tensor
is ``max|analytic - numeric| / (max|numeric| + 1e-8)``, i.e. relative to the
tensor's own gradient scale, and a check reports the maximum over its tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .model import BOS, EOS, ModelConfig, Summarizer, block_loss, carry_context, encode_block, step_block

EPS = 1e-5
TOLERANCE = 1e-4


def tensor_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-8))


@dataclass
class CheckResult:
    name: str
    error: float
    tensors: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def check_function(name: str, f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = EPS) -> CheckResult:
    """Gradient check of scalar ``f(*tensors)`` with respect to every input."""
    with ad.precision(np.float64):
        xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        ad.backward(f(*xs))
        worst = 0.0
        for i, x in enumerate(xs):

            def fi(t, i=i):
                args = [Tensor(v.data) for v in xs]
                args[i] = t
                return f(*args)

            numeric = ad.finite_difference_grad(fi, Tensor(x.data.copy()), eps)
            worst = max(worst, tensor_error(x.grad, numeric))
    return CheckResult(name, worst, len(xs))


def check_params(
    name: str,
    params: Dict[str, Tensor],
    loss_fn: Callable[[], Tensor],
    eps: float = EPS,
    samples: Optional[int] = None,
    seed: int = 0,
) -> CheckResult:
    """Gradient check of ``loss_fn()`` with respect to a parameter dict, perturbing in place.

    With ``samples=None`` every element of every tensor is checked. Otherwise
    each tensor is probed at ``samples`` coordinates (half of them the largest
    analytic entries, half uniformly random) plus one random direction over
    the whole tensor; errors are then scaled by the tensor's full analytic
    gradient norm so that near-zero sampled entries do not inflate them.
    """
    for p in params.values():
        p.grad = None
    ad.backward(loss_fn())
    rng = np.random.default_rng([seed, 11])
    worst = 0.0

    def probe(flat, j, delta):
        orig = flat[j].copy()
        flat[j] = orig + eps * delta
        plus = loss_fn().item()
        flat[j] = orig - eps * delta
        minus = loss_fn().item()
        flat[j] = orig
        return (plus - minus) / (2 * eps)

    with ad.no_grad():
        for p in params.values():
            flat = p.data.reshape(-1)
            analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            if samples is None or flat.size <= samples:
                numeric = np.array([probe(flat, j, 1.0) for j in range(flat.size)])
                worst = max(worst, tensor_error(analytic, numeric))
                continue
            top = np.argsort(-np.abs(analytic), kind="stable")[: samples // 2]
            rest = np.setdiff1d(np.arange(flat.size), top)
            idx = np.concatenate([top, rng.choice(rest, samples - top.size, replace=False)])
            numeric = np.array([probe(flat, j, 1.0) for j in idx])
            scale = np.max(np.abs(analytic)) + 1e-8
            worst = max(worst, float(np.max(np.abs(analytic[idx] - numeric)) / scale))
            u = rng.standard_normal(flat.size)
            directional = probe(flat, slice(None), u)
            bound = np.linalg.norm(analytic) * np.linalg.norm(u) + 1e-8
            worst = max(worst, abs(float(analytic @ u) - directional) / bound)
    return CheckResult(name, worst, len(params))


def _weighted_sum(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.uniform(-1, 1, shape))
    return lambda y: ad.sum(ad.mul(y, w))


def layer_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1, 1, shape)  # noqa: E731
    out = []
    with ad.precision(np.float64):
        ws = _weighted_sum(rng, (4, 5))
        out.append(check_function("linear", lambda x, W, b: ws(L.linear(x, W, b)), [u(4, 3), u(3, 5), u(5)]))
        out.append(check_function(
            "layer_norm", lambda x, g, b: ws(L.layer_norm(x, g, b)), [u(4, 5), 1 + 0.2 * u(5), u(5)]
        ))
        out.append(check_function(
            "softmax", lambda x: ws(ad.softmax(x, axis=1)), [2 * u(4, 5)]
        ))
        out.append(check_function(
            "log_softmax", lambda x: ws(ad.log_softmax(x, axis=1)), [2 * u(4, 5)]
        ))
        out.append(check_function(
            "relu_exp_log", lambda x: ws(ad.log(ad.add(ad.exp(ad.relu(x)), 1.0))), [u(4, 5)]
        ))
        w_emb = _weighted_sum(rng, (4, 5))
        ids = np.array([0, 2, 2, 1])
        out.append(check_function("embedding", lambda E: w_emb(ad.embedding(E, ids)), [u(3, 5)]))

        d, h = 8, 2
        cfg = L.AttentionConfig(d, h, 0.0)
        names = ["W_q", "b_q", "W_k", "W_v", "b_v", "W_o", "b_o"]
        shapes = [(d, d), (d,), (d, d), (d, d), (d,), (d, d), (d,)]
        mask = L.causal_mask(5)
        wa = _weighted_sum(rng, (5, d))

        def mha(x, m, *ps):
            params = {f"a.{n}": p for n, p in zip(names, ps)}
            return wa(L.multi_head_attention(x, m, m, params, "a", cfg, mask=mask))

        out.append(check_function("multi_head_attention", mha, [u(5, d), u(5, d)] + [0.5 * u(*s) for s in shapes]))

        wf = _weighted_sum(rng, (5, d))

        def ff(x, W1, b1, W2, b2):
            return wf(L.feed_forward(x, {"f.W_1": W1, "f.b_1": b1, "f.W_2": W2, "f.b_2": b2}, "f"))

        out.append(check_function("feed_forward", ff, [u(5, d), u(d, 12), u(12), u(12, d), u(d)]))

        D, n = 3, 17
        Lout = L.subsampled_length(n)
        wc = _weighted_sum(rng, (Lout, d))

        def conv(x, c1, b1, c2, b2, pw, pb):
            params = {"s.conv1_W": c1, "s.conv1_b": b1, "s.conv2_W": c2, "s.conv2_b": b2,
                      "s.proj_W": pw, "s.proj_b": pb}
            return wc(L.conv_subsample(x, params, "s"))

        k = L.SUBSAMPLE_KERNEL
        out.append(check_function(
            "conv_subsample", conv, [u(n, D), u(k * D, d), u(d), u(k * d, d), u(d), u(d, d), u(d)]
        ))

        targets = np.array([4, 2, 0, 5, 1])
        out.append(check_function(
            "label_smoothed_cross_entropy",
            lambda z: L.label_smoothed_cross_entropy(z, targets, 0.15, pad_id=0),
            [2 * u(5, 7)],
        ))
        out.append(check_function(
            "concat_slice",
            lambda a, b: ws(ad.slice(ad.concat([a, b], axis=0), 0, 1, 5)),
            [u(2, 5), u(4, 5)],
        ))
    return out


SMALL_MODEL = dict(
    feature_dim=4, model_dim=16, heads=2, encoder_layers=2, decoder_layers=2,
    ff_dim=32, vocab_size=12, dropout_rate=0.0,
)


MODEL_SAMPLES = 4


def model_check(updater_kind: str, seed: int = 0, samples: Optional[int] = MODEL_SAMPLES) -> CheckResult:
    """Full 2+2 model: first-block loss plus second-block loss with the carried context held fixed.

    ``samples`` is passed to :func:`check_params`; ``None`` checks every
    parameter element, which takes several minutes.
    """
    rng = np.random.default_rng([seed, 7])
    with ad.precision(np.float64):
        cfg = ModelConfig(**SMALL_MODEL, updater_kind=updater_kind)
        model = Summarizer(cfg, seed=seed, dtype=np.float64)
        if "upd.gate" in model.params:
            model.params["upd.gate"].data[:] = 0.5  # a zero gate would hide the updater path
        blocks = [rng.standard_normal((15, cfg.feature_dim)), rng.standard_normal((11, cfg.feature_dim))]
        reference = [BOS, 5, 9, 4, 11, EOS]
        with ad.no_grad():
            S1, enc1 = step_block(model, [], blocks[0])
            context = carry_context(model, [], S1, enc1)

        def loss_fn():
            S_a = encode_block(model, blocks[0])
            first, _ = block_loss(model, S_a, reference, (), 0.15)
            S_b, _ = step_block(model, context, blocks[1])
            second, _ = block_loss(model, S_b, reference, context, 0.15)
            return ad.add(first, second)

        return check_params(f"model[{updater_kind}]", model.params, loss_fn, samples=samples, seed=seed)


def run_gradcheck(seed: int = 0, updaters: Sequence[str] = ("concat", "gated", "hierarchical")) -> List[CheckResult]:
    ad.clear_tape()
    results = layer_checks(seed)
    results.extend(model_check(kind, seed) for kind in updaters)
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{r.name}\t{r.error:.3e}\t{'ok' if r.passed else 'FAIL'}" for r in results]
    worst = max(r.error for r in results)
    lines.append(f"max relative error {worst:.3e}")
    return "\n".join(lines) + "\n"
