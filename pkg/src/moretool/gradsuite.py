"""Finite-difference gradient checks of whole models on random instances."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .models import LCSpec, ModelSpec, PoolingSpec, forward, init_params
from .rng import RngStreams, stream
from .training import bce_loss

# A central difference with step h moves a first-layer pre-activation by about
# h * |x|; redraw instances with any relu input closer than this to zero.
KINK_MARGIN = 5e-3
# near a pole 1/x the central-difference error is about (step / x) ** 2
POLE_MARGIN = 0.1
MAX_REDRAWS = 50


def random_instance(spec: ModelSpec, seed: int, batch: int = 16, input_scale: float = 1.0, param_noise: float = 0.1):
    """Random parameters, inputs and binary labels for ``spec``.

    Parameters are the normal initialisation plus Gaussian noise, so
    zero-initialised layers (biases, the LC output projection) also carry
    gradient signal.
    """
    rng = stream(seed, "gradcheck")
    params = init_params(spec, rng, with_lc=spec.lc is not None)
    for p in params.values():
        if p.requires_grad:
            p.value = p.value + rng.normal(0.0, param_noise, p.shape)
    if spec.frame_level:
        inputs = [rng.normal(0.0, input_scale, (int(rng.integers(1, 6)), spec.input_dim)) for _ in range(batch)]
    else:
        inputs = rng.normal(0.0, input_scale, (batch, spec.input_dim))
    labels = (rng.random((batch, spec.num_classes)) < 0.3).astype(np.float64)
    return params, inputs, labels


def check_model(spec: ModelSpec, seed: int, step: float = 1e-3, keep_prob: float = 0.8) -> float:
    """Max relative gradient error of the training loss w.r.t. every parameter.

    The forward pass runs in train mode (batch statistics, a fixed dropout
    mask per evaluation). Instances too close to a ReLU kink or a reciprocal pole are redrawn.
    """
    for attempt in range(MAX_REDRAWS):
        params, inputs, labels = random_instance(spec, seed * 1000 + attempt)

        def loss():
            out = forward(spec, params, inputs, mode=T.Mode.TRAIN, rng=RngStreams(seed, attempt), keep_prob=keep_prob)
            return bce_loss(out, labels)

        weights = [p for p in params.values() if p.requires_grad]
        try:
            return T.grad_check(loss, weights, step=step, kink_margin=KINK_MARGIN, pole_margin=POLE_MARGIN)
        except T.KinkError:
            continue
    raise T.GradCheckError(f"no kink-free instance in {MAX_REDRAWS} draws for seed {seed}")


def suite_specs(num_classes: int = 3, input_dim: int = 4) -> dict:
    """Small instances of every model family."""
    C, d = num_classes, input_dim
    return {
        "MoE": ModelSpec("MoE", C, d, num_experts=3),
        "MoRE": ModelSpec("MoRE", C, d, num_experts=3, expert_hidden=7),
        "MoHCE": ModelSpec("MoHCE", C, d, num_experts=3, hypercolumn_depths=[4, 3]),
        "MoRE+LC": ModelSpec("MoRE", C, d, num_experts=2, expert_hidden=5, lc=LCSpec(latent_dim=6)),
        "AttentiveDBoF": ModelSpec("MoE", C, d, num_experts=2, pooling=PoolingSpec("attentive_dbof", code_dim=6)),
        "NetVLAD": ModelSpec(
            "MoE", C, d, num_experts=2, pooling=PoolingSpec("netvlad", code_dim=6, clusters=3, out_dim=4)
        ),
    }
