"""Finite-difference verification suites behind the gradcheck command.

Three scopes: ``ops`` sweeps every differentiable primitive, ``block``
checks one full bidirectional block, ``full`` drives the assembled model
(toy dims: d_model 16, depth 1, 8 sequence tokens) from parameters to
scalar loss. Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .fusion import Model, ModelConfig, cross_attention_fuse, mlp_regress
from .optim import smooth_l1
from .prior import PriorEncoderConfig
from .ssm import VimConfig, init_block_params, init_scan_params, linear_recurrence, mamba_block, selective_scan
from .tensor import GradCheckReport, Tensor, grad_check, grad_check_params

OPS_TOL = 1e-6
BLOCK_TOL = 1e-4
FULL_TOL = 1e-4


def _rand(rng, shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)


def gradcheck_ops(seed: int = 0) -> list[GradCheckReport]:
    """Central differences over every differentiable primitive."""
    rng = np.random.default_rng(seed)
    mix = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    other = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    reports: list[GradCheckReport] = []

    unary = {
        "neg": T.neg,
        "exp": T.exp,
        "softplus": T.softplus,
        "silu": T.silu,
        "abs": T.absolute,
        "softmax": lambda t: T.softmax(t, axis=-1),
        "reduce_sum": lambda t: T.reduce_sum(t, axis=0).reshape(1, 4),
        "reduce_mean": lambda t: T.reduce_mean(t, axis=1).reshape(3, 1),
        "reshape": lambda t: T.reshape(t, (4, 3)).reshape(3, 4),
        "transpose": lambda t: T.transpose(t).reshape(3, 4),
        "narrow": lambda t: T.concat([T.narrow(t, 1, 0, 2), T.narrow(t, 1, 2, 2)], axis=1),
        "flip": lambda t: T.flip(t, axis=1),
    }
    for name, op in unary.items():
        x = _rand(rng, (3, 4))
        reports.append(
            grad_check(lambda t, op=op: (op(t) * mix).sum(), x, tol=OPS_TOL, name=name)
        )

    x = Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True, dtype=np.float64)
    reports.append(
        grad_check(lambda t: (T.reciprocal(t) * mix).sum(), x, tol=OPS_TOL, name="reciprocal")
    )

    for name, op in {"add": T.add, "sub": T.sub, "mul": T.mul}.items():
        x = _rand(rng, (3, 4))
        reports.append(
            grad_check(lambda t, op=op: (op(t, other) * mix).sum(), x, tol=OPS_TOL, name=name)
        )

    w = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
    x = _rand(rng, (3, 4))
    reports.append(grad_check(lambda t: T.matmul(t, w).sum(), x, tol=OPS_TOL, name="matmul"))

    gain = _rand(rng, (4,))
    bias = _rand(rng, (4,))
    x = _rand(rng, (3, 4))
    reports.append(
        grad_check(
            lambda t: (T.layer_norm(t, gain, bias) * mix).sum(), x, tol=OPS_TOL, name="layer_norm"
        )
    )

    mask = rng.random((3, 4)) < 0.5
    a = _rand(rng, (3, 4))
    b = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    reports.append(
        grad_check(lambda t: (T.where(mask, t, b) * mix).sum(), a, tol=OPS_TOL, name="where")
    )

    coeff = Tensor(rng.uniform(0.1, 0.9, size=(10, 3)), requires_grad=True, dtype=np.float64)
    drive = Tensor(rng.normal(size=(10, 3)), requires_grad=True, dtype=np.float64)
    lr_mix = Tensor(rng.normal(size=(10, 3)), dtype=np.float64)
    reports.extend(
        grad_check_params(
            lambda: (linear_recurrence(coeff, drive) * lr_mix).sum(),
            {"linear_recurrence.a": coeff, "linear_recurrence.b": drive},
            tol=OPS_TOL,
        )
    )

    # quadratic branch of the regression loss: analytic grad is -(y - yhat)/n
    y = Tensor(np.array([0.3, -0.1, 0.25]), dtype=np.float64)
    pred = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    reports.append(
        grad_check(lambda t: smooth_l1(y, t), pred, tol=OPS_TOL, name="smooth_l1")
    )
    return reports


def gradcheck_block(seed: int = 0) -> list[GradCheckReport]:
    """One bidirectional gated block on an 8-token input."""
    rng = np.random.default_rng(seed)
    cfg = VimConfig(patch_size=1, d_model=8, depth=1, d_state=3, expand=2)
    params = init_block_params(np.random.default_rng([seed, 1]), cfg, dtype=np.float64)
    x = Tensor(rng.normal(size=(8, 8)), dtype=np.float64)
    named = params.named("block")
    return grad_check_params(lambda: mamba_block(x, params).sum(), named, tol=BLOCK_TOL)


def gradcheck_full(seed: int = 0) -> list[GradCheckReport]:
    """Assembled model at toy dims: d_model 16, depth 1, 8 tokens."""
    cfg = ModelConfig(
        image_size=6,
        vim=VimConfig(patch_size=2, d_model=16, depth=1, d_state=4, expand=2),
        prior=PriorEncoderConfig(stage_channels=(2, 2, 3, 3), seed=0),
        num_heads=4,
        d_hidden=32,
        fusion_mode="cross_attention",
    )
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 2])
    patches = rng.normal(size=(1, 8, 12))
    pooled = [rng.normal(size=(1, 4, c)) for c in cfg.prior.stage_channels]
    target = Tensor(np.array([2.5]), dtype=np.float64)
    return grad_check_params(
        lambda: smooth_l1(target, model.forward_features(patches, pooled)),
        model.trainable(),
        tol=FULL_TOL,
    )


SCOPES = {
    "ops": gradcheck_ops,
    "block": gradcheck_block,
    "full": gradcheck_full,
}


def run_scope(scope: str, seed: int = 0) -> list[GradCheckReport]:
    try:
        fn = SCOPES[scope]
    except KeyError:
        raise ContractError(f"unknown gradcheck scope {scope!r}; pick from {sorted(SCOPES)}")
    return fn(seed)
