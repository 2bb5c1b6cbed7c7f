"""Finite-difference verification battery.

Each check compares analytic tape gradients against central differences in
double precision. The full-model check perturbs a seeded sample of
parameter scalars (sweeping every scalar of even the micro model would take
hours for no extra confidence).
"""

from __future__ import annotations

import numpy as np

from .config import PRESETS, build_model
from .decoder import MCANet
from .errors import ShapeError
from .ops import attention_params, conv_params, layer_norm_channel, bilinear_resize, conv2d, mhca_axis
from .tensor import (
    Tensor,
    add,
    backward,
    clear_graph,
    concat_channels,
    finite_checks,
    grad_check,
    matmul,
    mul,
    no_grad,
    precision,
    reshape,
    softmax_axis,
    sum_all,
    gelu,
    uniform,
)
from .train import cross_entropy_loss

__all__ = ["gradcheck_ops", "gradcheck_decoder", "gradcheck_model", "run_battery"]


def _weighted_sum(t: Tensor, seed: int = 99) -> Tensor:
    """Scalar probe with non-uniform weights so gradients are not washed out."""
    w = uniform(t.shape, seed, 0.5, 1.5)
    return sum_all(mul(t, w))


def gradcheck_ops(eps: float = 1e-5) -> dict[str, float]:
    """Max relative FD error of every differentiable primitive."""
    rng = np.random.default_rng(1234)
    results: dict[str, float] = {}
    with precision("float64"):
        x4 = uniform((2, 3, 5, 4), 11, -1, 1, requires_grad=True)

        results["add"] = grad_check(lambda t: _weighted_sum(add(t, uniform(t.shape, 5))), x4, eps)
        results["add_channel_bias"] = grad_check(
            lambda t: _weighted_sum(add(x4.detach(), reshape(t, (3,)))),
            uniform((3,), 6, -1, 1, requires_grad=True), eps)
        results["mul"] = grad_check(lambda t: _weighted_sum(mul(t, uniform(t.shape, 7))), x4, eps)
        results["scale_gelu"] = grad_check(lambda t: _weighted_sum(gelu(t)), x4, eps)

        a = uniform((2, 3, 4), 21, -1, 1, requires_grad=True)
        bmat = uniform((2, 4, 5), 22, -1, 1)
        results["matmul"] = grad_check(
            lambda t: _weighted_sum(matmul(t, bmat)), a, eps)
        results["softmax"] = grad_check(
            lambda t: _weighted_sum(softmax_axis(t, -1)), x4, eps)
        results["concat"] = grad_check(
            lambda t: _weighted_sum(concat_channels([t, uniform(t.shape, 31)])), x4, eps)

        w_full = conv_params(rng, 3, 4, 3, stride=2)
        results["conv2d_3x3_s2"] = grad_check(
            lambda t: _weighted_sum(conv2d(t, w_full)),
            uniform((1, 3, 8, 8), 41, -1, 1, requires_grad=True), eps)
        x_fixed = uniform((1, 3, 6, 6), 42)
        results["conv2d_weight"] = grad_check(
            lambda t: _weighted_sum(conv2d(x_fixed, ConvShim(t))),
            uniform((2, 3, 3, 3), 43, -1, 1, requires_grad=True), eps)

        w_strip = conv_params(rng, 3, 3, (1, 7), groups=3)
        results["conv2d_strip_dw"] = grad_check(
            lambda t: _weighted_sum(conv2d(t, w_strip)),
            uniform((1, 3, 4, 9), 44, -1, 1, requires_grad=True), eps)

        gamma = uniform((4,), 51, 0.5, 1.5, requires_grad=True)
        beta = uniform((4,), 52, -0.5, 0.5, requires_grad=True)
        xn = uniform((2, 4, 3, 3), 53, -2, 2, requires_grad=True)
        results["layer_norm_x"] = grad_check(
            lambda t: _weighted_sum(layer_norm_channel(t, gamma, beta)), xn, eps)
        results["layer_norm_gamma"] = grad_check(
            lambda t: _weighted_sum(layer_norm_channel(xn.detach(), t, beta)), gamma, eps)

        results["bilinear_up"] = grad_check(
            lambda t: _weighted_sum(bilinear_resize(t, 7, 9)),
            uniform((1, 2, 3, 4), 61, -1, 1, requires_grad=True), eps)
        results["bilinear_down"] = grad_check(
            lambda t: _weighted_sum(bilinear_resize(t, 3, 2)),
            uniform((1, 2, 6, 5), 62, -1, 1, requires_grad=True), eps)

        ap = attention_params(rng, 4, 2)
        kv = uniform((1, 4, 3, 3), 71, -1, 1)
        results["mhca_columns"] = grad_check(
            lambda t: _weighted_sum(mhca_axis(t, kv, "columns", ap)),
            uniform((1, 4, 3, 3), 72, -1, 1, requires_grad=True), eps)
        results["mhca_rows_kv"] = grad_check(
            lambda t: _weighted_sum(mhca_axis(kv, t, "rows", ap)),
            uniform((1, 4, 3, 3), 73, -1, 1, requires_grad=True), eps)

        mask_b = (np.arange(12).reshape(1, 3, 4) % 2).astype(np.int64)
        results["bce_loss"] = grad_check(
            lambda t: cross_entropy_loss(t, mask_b, "binary"),
            uniform((1, 1, 3, 4), 81, -2, 2, requires_grad=True), eps)
        mask_m = (np.arange(12).reshape(1, 3, 4) % 3).astype(np.int64)
        results["ce_loss"] = grad_check(
            lambda t: cross_entropy_loss(t, mask_m, "multiclass"),
            uniform((1, 3, 3, 4), 82, -2, 2, requires_grad=True), eps)
    clear_graph()
    return results


class ConvShim:
    """Adapter letting grad_check treat a conv weight as the free variable."""

    def __init__(self, weight: Tensor):
        self.weight = weight
        self.bias = None
        self.stride = (1, 1)
        kh, kw = weight.shape[2], weight.shape[3]
        self.padding = ((kh - 1) // 2, (kw - 1) // 2)
        self.groups = 1


def gradcheck_decoder(eps: float = 1e-5) -> float:
    """FD check of the cross-axis attention body on a small double input."""
    with precision("float64"):
        model = build_model(PRESETS["micro"], seed=3)
        dec = model.decoder
        x = uniform((1, dec.spec.channels, 6, 6), 301, -1, 1, requires_grad=True)
        err = grad_check(lambda t: _weighted_sum(dec.mca_forward(t)), x, eps)
    clear_graph()
    return err


def gradcheck_model(max_per_tensor: int = 24, eps: float = 1e-5,
                    seed: int = 7, input_hw: int = 32) -> float:
    """FD check of the full micro network through forward plus loss.

    Perturbs up to ``max_per_tensor`` seeded scalars of every parameter
    tensor and compares against the tape gradient from one backward pass.
    """
    with precision("float64"):
        spec = PRESETS["micro"]
        model = build_model(spec, seed=seed)
        rng = np.random.default_rng(seed)
        img = Tensor(rng.uniform(0, 1, (1, spec.encoder.in_channels,
                                        input_hw, input_hw)))
        mask = (rng.uniform(size=(1, input_hw, input_hw)) > 0.5).astype(np.int64)
        mode = "binary" if spec.decoder.num_classes == 1 else "multiclass"

        def loss_fn() -> float:
            return float(cross_entropy_loss(model.forward(img), mask, mode).data)

        clear_graph()
        model.zero_grad()
        with finite_checks():
            loss = cross_entropy_loss(model.forward(img), mask, mode)
            backward(loss)
        clear_graph()

        worst = 0.0
        with no_grad():
            for name, p in model.named_parameters():
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                gflat = grad.reshape(-1)
                k = min(max_per_tensor, flat.size)
                picks = rng.choice(flat.size, size=k, replace=False)
                for idx in picks:
                    orig = float(flat[idx])
                    h = eps * max(1.0, abs(orig))
                    flat[idx] = orig + h
                    fp = loss_fn()
                    flat[idx] = orig - h
                    fm = loss_fn()
                    flat[idx] = orig
                    numeric = (fp - fm) / (2.0 * h)
                    rel = abs(gflat[idx] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, rel)
        model.zero_grad()
    clear_graph()
    return worst


def run_battery(which: str = "all") -> tuple[float, dict[str, float]]:
    """Run the requested checks; returns (max error, per-check errors)."""
    results: dict[str, float] = {}
    if which in ("all", "ops"):
        results.update(gradcheck_ops())
    if which in ("all", "decoder"):
        results["decoder_mca"] = gradcheck_decoder()
    if which == "all":
        results["full_micro_model"] = gradcheck_model()
    if not results:
        raise ShapeError(f"unknown battery {which!r}; use all|decoder|ops")
    return max(results.values()), results
