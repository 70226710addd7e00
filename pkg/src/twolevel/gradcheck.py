"""Central finite-difference verification of every differentiable component.

Each check builds a tiny random problem, computes autodiff gradients of a
scalar readout, then re-derives them by perturbing every input element with
central differences (h=1e-5). The readout weights are fixed random so all
output elements influence the scalar. Requires f64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .aggregation import AggregatorConfig, AverageAggregator, SelfAttentionAggregator
from .autodiff import Tensor
from .encoders import ClipEncoder, EncoderConfig, TextEncoder
from .objectives import (
    ChildBatch,
    ParentBatch,
    child_loss,
    parent_loss,
    parent_loss_no_summary,
)

FD_STEP = 1e-5
REL_TOL = 1e-4
_REL_FLOOR = 1e-4


def finite_difference_grad(
    fn: Callable[[], Tensor], param: Tensor, h: float = FD_STEP
) -> np.ndarray:
    """d fn / d param by central differences, perturbing one element at a time."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-element relative error, floored so near-zero pairs compare
    on an absolute scale."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(
    fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = FD_STEP
) -> float:
    """Compare autodiff gradients of `fn` against finite differences over all
    named params; return the worst relative error."""
    grads = ad.gradient_map(fn(), params)
    worst = 0.0
    for name, p in params.items():
        fd = finite_difference_grad(fn, p, h)
        worst = max(worst, max_rel_error(grads[name], fd))
    return worst


def _readout(t: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.normal(size=t.shape))
    return (t * w).sum()


# -- per-op checks ----------------------------------------------------------------


def _fixed_readout(seed: int) -> Callable[[Tensor], Tensor]:
    """Scalar readout with weights fixed on first use per shape, so repeated
    evaluations (FD probes) see one and the same function."""
    cache: dict[tuple[int, ...], Tensor] = {}

    def ro(t: Tensor) -> Tensor:
        w = cache.get(t.shape)
        if w is None:
            w = Tensor(np.random.default_rng(seed).normal(size=t.shape))
            cache[t.shape] = w
        return (t * w).sum()

    return ro


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x34, y34 = leaf(3, 4), leaf(3, 4)
    row = leaf(1, 4)
    a_mat, b_mat = leaf(3, 4), leaf(4, 5)
    a_bat, b_bat = leaf(2, 3, 4), leaf(2, 4, 5)
    w_shared = leaf(4, 5)
    x_t = leaf(2, 3, 4)
    x_r = leaf(2, 6)
    c1, c2 = leaf(2, 3), leaf(2, 2)
    x_sm = leaf(3, 5)
    x_ln = leaf(3, 6)
    g_ln, b_ln = leaf(6), leaf(6)
    x_gelu = leaf(3, 4)
    table = leaf(7, 4)
    ids = np.array([[0, 3, 6], [2, 2, 5]])
    x_mean, x_sum = leaf(3, 4), leaf(3, 4)
    x_l2 = leaf(3, 4)
    x_log = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    x_exp = leaf(3, 4)
    x_msk = leaf(3, 5)
    msk = rng.random((3, 5)) > 0.4
    msk[:, 0] = True  # no empty rows
    x_srt = leaf(2, 5, 3)
    x_lse = leaf(3, 6)
    lse_where = rng.random((3, 6)) > 0.5
    lse_where[:, 0] = True

    ro = _fixed_readout(int(rng.integers(1 << 30)))
    return {
        "add": (lambda: ro(x34 + row), {"x": x34, "row": row}),
        "multiply": (lambda: ro(x34 * y34), {"x": x34, "y": y34}),
        "matmul": (lambda: ro(a_mat @ b_mat), {"a": a_mat, "b": b_mat}),
        "matmul_batched": (lambda: ro(a_bat @ b_bat), {"a": a_bat, "b": b_bat}),
        "matmul_shared_rhs": (lambda: ro(x_t @ w_shared), {"x": x_t, "w": w_shared}),
        "transpose": (lambda: ro(x_t.transpose((1, 0, 2))), {"x": x_t}),
        "reshape": (lambda: ro(x_r.reshape(2, 3, 2)), {"x": x_r}),
        "concat": (lambda: ro(ad.concat([c1, c2], axis=1)), {"a": c1, "b": c2}),
        "slice": (lambda: ro(x_t[:, 1, 1:3]), {"x": x_t}),
        "softmax": (lambda: ro(ad.softmax(x_sm)), {"x": x_sm}),
        "layer_norm": (
            lambda: ro(ad.layer_norm(x_ln, g_ln, b_ln)),
            {"x": x_ln, "g": g_ln, "b": b_ln},
        ),
        "gelu": (lambda: ro(ad.gelu(x_gelu)), {"x": x_gelu}),
        "embedding_lookup": (lambda: ro(ad.embedding_lookup(table, ids)), {"t": table}),
        "mean": (lambda: ro(x_mean.mean(axis=1)), {"x": x_mean}),
        "sum": (lambda: ro(x_sum.sum(axis=0)), {"x": x_sum}),
        "l2_normalize": (lambda: ro(ad.l2_normalize(x_l2)), {"x": x_l2}),
        "log": (lambda: ro(ad.log(x_log)), {"x": x_log}),
        "exp": (lambda: ro(ad.exp(x_exp)), {"x": x_exp}),
        "masked_sum": (lambda: ro(ad.masked_sum(x_msk, msk, axis=1)), {"x": x_msk}),
        "masked_mean": (lambda: ro(ad.masked_mean(x_msk, msk, axis=1)), {"x": x_msk}),
        "sorted_mean": (lambda: ro(ad.sorted_mean(x_srt, axis=1)), {"x": x_srt}),
        "logsumexp": (lambda: ro(ad.logsumexp(x_lse, axis=1)), {"x": x_lse}),
        "logsumexp_where": (
            lambda: ro(ad.logsumexp(x_lse, axis=1, where=lse_where)),
            {"x": x_lse},
        ),
    }


def check_ops(seed: int = 0) -> dict[str, float]:
    """Worst FD relative error per registered op."""
    rng = np.random.default_rng(seed)
    return {name: check_gradients(fn, params) for name, (fn, params) in _op_cases(rng).items()}


# -- component checks -------------------------------------------------------------------


def _tiny_setup(seed: int):
    rng = np.random.default_rng(seed)
    clip_cfg = EncoderConfig(
        model_dim=8, num_layers=1, num_heads=2, mlp_dim=16,
        max_seq_len=6, embed_dim=6, frame_feature_dim=5,
    )
    text_cfg = EncoderConfig(
        model_dim=8, num_layers=1, num_heads=2, mlp_dim=16,
        max_seq_len=6, embed_dim=6, vocab_size=12,
    )
    clip_enc = ClipEncoder(clip_cfg, rng)
    text_enc = TextEncoder(text_cfg, rng)
    agg_cfg = AggregatorConfig(
        kind="self_attention", k_clips=3, sa_layers=1, sa_heads=2,
        sa_model_dim=6, sa_mlp_dim=12,
    )
    agg = SelfAttentionAggregator(agg_cfg, rng)
    return rng, clip_enc, text_enc, agg


def check_clip_encoder(seed: int = 0) -> float:
    rng, clip_enc, _, _ = _tiny_setup(seed)
    frames = rng.normal(size=(3, 4, 5))
    lens = np.array([4, 2, 3])
    fn = lambda: _readout(clip_enc.encode_batch(frames, lens), np.random.default_rng(seed + 1))  # noqa: E731
    return check_gradients(fn, dict(clip_enc.named_params()))


def check_text_encoder(seed: int = 0) -> float:
    rng, _, text_enc, _ = _tiny_setup(seed)
    tokens = rng.integers(0, 12, size=(3, 5))
    lens = np.array([5, 1, 3])
    fn = lambda: _readout(text_enc.encode_batch(tokens, lens), np.random.default_rng(seed + 1))  # noqa: E731
    return check_gradients(fn, dict(text_enc.named_params()))


def check_sa_aggregator(seed: int = 0) -> float:
    rng, _, _, agg = _tiny_setup(seed)
    seq = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    fn = lambda: _readout(agg.aggregate(seq), np.random.default_rng(seed + 1))  # noqa: E731
    params = {"seq": seq, **agg.named_params()}
    return check_gradients(fn, params)


def check_avg_aggregator(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    agg = AverageAggregator()
    seq = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    fn = lambda: _readout(agg.aggregate(seq), np.random.default_rng(seed + 1))  # noqa: E731
    return check_gradients(fn, {"seq": seq})


def check_child_loss(seed: int = 0) -> float:
    """Full child loss on a 4-item batch, differentiated to every parameter."""
    rng, clip_enc, text_enc, _ = _tiny_setup(seed)
    frames = rng.normal(size=(4, 4, 5))
    flens = np.array([4, 2, 3, 4])
    tokens = rng.integers(0, 12, size=(4, 5))
    tlens = np.array([5, 3, 1, 4])
    mask = np.eye(4, dtype=bool)
    mask[0, 1] = mask[1, 0] = True

    def fn():
        clip_emb = clip_enc.encode_batch(frames, flens)
        text_emb = text_enc.encode_batch(tokens, tlens)
        return child_loss(ChildBatch(clip_emb, text_emb, mask), temperature=0.5)

    params = {
        **{f"clip.{k}": v for k, v in clip_enc.named_params().items()},
        **{f"text.{k}": v for k, v in text_enc.named_params().items()},
    }
    return check_gradients(fn, params)


def _parent_setup(seed: int):
    rng, clip_enc, text_enc, agg = _tiny_setup(seed)
    b, k = 2, 3
    frames = rng.normal(size=(b * k, 4, 5))
    flens = rng.integers(2, 5, size=b * k)
    narr = rng.integers(0, 12, size=(b * k, 4))
    nlens = rng.integers(1, 5, size=b * k)
    summ = rng.integers(0, 12, size=(b, 4))
    slens = np.array([4, 3])

    def streams():
        f_v = agg.aggregate(clip_enc.encode_batch(frames, flens).reshape(b, k, 6))
        f_n = agg.aggregate(text_enc.encode_batch(narr, nlens).reshape(b, k, 6))
        f_s = text_enc.encode_batch(summ, slens)
        return f_v, f_n, f_s

    params = {
        **{f"clip.{k2}": v for k2, v in clip_enc.named_params().items()},
        **{f"text.{k2}": v for k2, v in text_enc.named_params().items()},
        **{f"agg.{k2}": v for k2, v in agg.named_params().items()},
    }
    return streams, params


def check_parent_loss(seed: int = 0) -> float:
    """Summary-matching parent loss through encoders and aggregator."""
    streams, params = _parent_setup(seed)

    def fn():
        f_v, f_n, f_s = streams()
        return parent_loss(ParentBatch(f_v, f_n, f_s, np.eye(2, dtype=bool)), 0.5)

    return check_gradients(fn, params)


def check_parent_loss_no_summary(seed: int = 0) -> float:
    """No-summary variant: aggregated video vs aggregated narration features."""
    streams, params = _parent_setup(seed)

    def fn():
        f_v, f_n, _ = streams()
        return parent_loss_no_summary(f_v, f_n, 0.5)

    return check_gradients(fn, params)


def run_all(seed: int = 0) -> dict[str, dict]:
    """The full gradient-integrity suite; each entry reports its worst relative
    error against REL_TOL."""
    results: dict[str, float] = {}
    for name, err in check_ops(seed).items():
        results[f"op.{name}"] = err
    results["clip_encoder"] = check_clip_encoder(seed)
    results["text_encoder"] = check_text_encoder(seed)
    results["aggregator_self_attention"] = check_sa_aggregator(seed)
    results["aggregator_average"] = check_avg_aggregator(seed)
    results["child_loss"] = check_child_loss(seed)
    results["parent_loss"] = check_parent_loss(seed)
    results["parent_loss_no_summary"] = check_parent_loss_no_summary(seed)
    return {
        name: {"max_rel_err": err, "passed": bool(err < REL_TOL)}
        for name, err in results.items()
    }
