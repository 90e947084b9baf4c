"""Conditioning head: residual fusion of the enriched features into a
single adapter token, plus the dual-branch attention injected into the
denoiser (frozen text branch + lambda-scaled trainable branch).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CrossAttention
from .qlt import QltError, load_checkpoint
from .rng import Rng
from .tensor import Param, Tensor, add, linear, mha, mul


@dataclass
class ConditionBundle:
    """Inputs to the denoiser: text tokens, fused adapter token, lambda."""

    f_t: Tensor          # [n_t, d_t]: empty token at train time, edit prompt at inference
    f: Tensor            # [1, d_i]: fused adapter token
    lam: float = 0.8

    def __post_init__(self):
        if self.f.ndim != 2 or self.f.shape[0] != 1:
            raise ValueError(f"adapter token must be [1, d], got {self.f.shape}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


class FuseParams:
    """Two residual cross-attention stages."""

    def __init__(self, d_i: int, d_t: int, heads: int, rng):
        r = rng.spawn("fuse")
        self.layout_stage = CrossAttention("fuse.layout", r, d_i, d_i, d_i, d_i, heads)
        self.text_stage = CrossAttention("fuse.text", r, d_i, d_t, d_i, d_i, heads)

    def params(self):
        return self.layout_stage.params() + self.text_stage.params()


def fuse(params: FuseParams, i_cls_aug: Tensor, t_aug: Tensor,
         f_layout: Tensor) -> Tensor:
    """Residual fusion of layout then text cues into one [1, d_i] token."""
    i_row = i_cls_aug.reshape(1, -1)
    layout_row = f_layout.reshape(1, -1)
    stage1 = add(i_row, params.layout_stage(i_row, layout_row))
    return add(stage1, params.text_stage(stage1, t_aug))


class DualBranchAttention:
    """Cross attention from the noisy latent with two key/value branches.

    The text branch (key/value from the text tokens, plus the shared
    query and output projections) is frozen; the adapter branch
    (key/value/output from the fused token) is trainable and scaled by
    lambda. The adapter-branch output projection is zero-initialized so
    a fresh model ignores the adapter token; the value projection stays
    random (zeroing both would zero the gradient of their product).
    """

    def __init__(self, name: str, d_z: int, d_t: int, d_i: int, heads: int,
                 rng: Rng):
        self.heads = heads
        r = rng.spawn(name)

        def p(sub, d_in, d_out, zero=False):
            data = (np.zeros((d_in, d_out)) if zero
                    else r.spawn(sub).normal((d_in, d_out), std=1.0 / np.sqrt(d_in)))
            return Param(f"{name}.{sub}", data)

        self.w_q = p("w_q", d_z, d_z)
        self.w_kt = p("w_kt", d_t, d_z)
        self.w_vt = p("w_vt", d_t, d_z)
        self.w_ot = p("w_ot", d_z, d_z)
        self.w_kf = p("w_kf", d_i, d_z)
        self.w_vf = p("w_vf", d_i, d_z)
        self.w_of = p("w_of", d_z, d_z, zero=True)

    def frozen_params(self):
        return [self.w_q, self.w_kt, self.w_vt, self.w_ot]

    def ip_params(self):
        return [self.w_kf, self.w_vf, self.w_of]

    def params(self):
        return self.frozen_params() + self.ip_params()


def dual_branch_attention(block: DualBranchAttention, z: Tensor,
                          f_t: Tensor, f: Tensor, lam: float,
                          weights_out: dict | None = None) -> Tensor:
    """Sum of the frozen text branch and lambda times the adapter branch.

    With lam == 0 the result is bit-equal to the text branch alone, and
    the output is affine in lam.
    """
    q = linear(z, block.w_q.tensor)
    k_t = linear(f_t, block.w_kt.tensor)
    v_t = linear(f_t, block.w_vt.tensor)
    text_w = {} if weights_out is not None else None
    text = linear(mha(q, k_t, v_t, block.heads, weights_out=text_w),
                  block.w_ot.tensor)
    if weights_out is not None:
        weights_out["text"] = text_w["weights"]

    k_f = linear(f, block.w_kf.tensor)
    v_f = linear(f, block.w_vf.tensor)
    ip_w = {} if weights_out is not None else None
    ip = linear(mha(q, k_f, v_f, block.heads, weights_out=ip_w),
                block.w_of.tensor)
    if weights_out is not None:
        weights_out["adapter"] = ip_w["weights"]
    if lam == 0.0:
        return text
    return add(text, mul(ip, float(lam)))


def load_pretrained_ip_weights(checkpoint_dir, blocks: dict, seed: int = 7):
    """Load adapter-branch weights from a prior checkpoint, else leave the
    deterministic seed-derived init in place.

    `blocks` maps site name -> DualBranchAttention. Returns the init
    source, "checkpoint" or "random(seed)".
    """
    if checkpoint_dir is None:
        rng = Rng(seed)
        for site in sorted(blocks):
            blk = blocks[site]
            for param in (blk.w_kf, blk.w_vf):
                sub = param.name.rsplit(".", 1)[-1]
                param.tensor.data = rng.spawn(f"{site}.{sub}").normal(
                    param.data.shape, std=1.0 / np.sqrt(param.data.shape[0])
                ).astype(param.data.dtype)
            blk.w_of.tensor.data = np.zeros_like(blk.w_of.data)
        return f"random({seed})"
    arrays, manifest = load_checkpoint(checkpoint_dir)
    section = manifest.get("ip_attention", {})
    for site, blk in blocks.items():
        for param in blk.ip_params():
            key = section.get(site, {}).get(param.name.rsplit(".", 1)[-1], param.name)
            if key not in arrays:
                raise QltError(f"checkpoint missing ip weight {key}")
            arr = arrays[key]
            if arr.shape != param.data.shape:
                raise QltError(f"ip weight {key}: checkpoint shape {arr.shape} "
                               f"!= expected {param.data.shape}")
            param.tensor.data = arr.astype(param.data.dtype)
    return "checkpoint"
