"""End-to-end wiring: encoders -> fusion modules -> denoiser.

Builds every component from a RunConfig with seed-derived parameters,
computes condition bundles, and handles checkpoints and training.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapter import ConditionBundle, FuseParams, fuse, load_pretrained_ip_weights
from .cmam import CmamParams, cmam_forward
from .config import RunConfig
from .data import caption_for, read_ppm
from .diffusion import (DenoiserState, image_to_latent, latent_to_image,
                        sample, training_step)
from .encoders import ImageEncoder, TextEncoder
from .ilfm import IlfmParams, ilfm_forward
from .layout import LayoutEmbedder, build_layout, load_layout_json
from .qlt import load_checkpoint, load_qlt, save_checkpoint
from .rng import Rng
from .tensor import Tensor, adamw_step


class Pipeline:
    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        rng = Rng(config.seed)
        grid = config.image_size // config.patch_size
        self.image_encoder = ImageEncoder(config.d_i, config.patch_size,
                                          config.image_size, config.heads, rng)
        self.text_encoder = TextEncoder(config.d_t, rng=rng)
        self.embedder = LayoutEmbedder(config.d_l, config.d_i, rng)
        self.ilfm = IlfmParams(config.d_i, config.d_l, grid * grid,
                               config.heads, rng)
        self.cmam = CmamParams(config.d_t, config.d_i, config.heads, rng)
        self.fuse = FuseParams(config.d_i, config.d_t, config.heads, rng)
        self.denoiser = DenoiserState(config, rng)
        dtype = np.float32 if config.dtype == "float32" else np.float64
        for p in self.all_params():
            p.set_dtype(dtype)
        self.freeze()

    # ------------------------------------------------------------------
    def adapter_head_params(self):
        return (self.embedder.params() + self.ilfm.params()
                + self.cmam.params() + self.fuse.params())

    def all_params(self):
        return (self.image_encoder.params() + self.text_encoder.params()
                + self.adapter_head_params() + self.denoiser.all_params())

    def named_params(self) -> dict:
        out = {}
        for p in self.all_params():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def freeze(self):
        """Everything frozen except the adapter branch at active sites."""
        for p in self.all_params():
            p.tensor.requires_grad = False
        return self.denoiser.set_trainable()

    # ------------------------------------------------------------------
    def condition(self, image: np.ndarray, boxes, aux_caption: str,
                  prompt: str = "", detach: bool = True) -> ConditionBundle:
        """Build the denoiser conditioning from an image, its layout and
        the auxiliary caption. `prompt` feeds the text branch: empty at
        train time, the edit prompt at inference. `detach=False` keeps
        the tape through the encoders (gradient-check harness)."""
        dtype = self.denoiser.w_in.data.dtype
        enc = self.image_encoder.encode(Tensor(np.asarray(image, dtype=dtype)))
        layout = build_layout(boxes, self.config.max_n)
        f_layout = ilfm_forward(self.ilfm, enc.patches, enc.grid, layout,
                                self.embedder)
        aux = self.text_encoder.encode(self.text_encoder.tokenize(aux_caption))
        t_aug, i_aug = cmam_forward(self.cmam, aux.tokens, enc.cls)
        f = fuse(self.fuse, i_aug, t_aug, f_layout)
        f_t = self.text_encoder.encode(self.text_encoder.tokenize(prompt))
        if not detach:
            return ConditionBundle(f_t=f_t.tokens, f=f, lam=self.config.lam)
        return ConditionBundle(f_t=Tensor(f_t.tokens.data.astype(dtype)),
                               f=Tensor(f.data.astype(dtype)),
                               lam=self.config.lam)

    # ------------------------------------------------------------------
    def save(self, directory):
        named = {n: p.data for n, p in self.named_params().items()}
        ip_section = {}
        for site in self.denoiser.active_sites():
            blk = self.denoiser.blocks[site].cross
            ip_section[site] = {p.name.rsplit(".", 1)[-1]: p.name
                                for p in blk.ip_params()}
        save_checkpoint(directory, named,
                        extra={"ip_attention": ip_section,
                               "config": self.config.to_dict()})

    def load(self, directory):
        arrays, manifest = load_checkpoint(directory)
        params = self.named_params()
        for name, p in params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: checkpoint shape "
                                 f"{arr.shape} != expected {p.data.shape}")
            p.tensor.data = arr.astype(p.data.dtype)
        return manifest

    def init_ip_weights(self, checkpoint_dir=None, seed: int = 7) -> str:
        blocks = {site: self.denoiser.blocks[site].cross
                  for site in self.denoiser.active_sites()}
        return load_pretrained_ip_weights(checkpoint_dir, blocks, seed=seed)

    # ------------------------------------------------------------------
    def load_scene(self, data_dir, name: str):
        """Return (image, latent, bundle-with-empty-prompt) for a scene."""
        data_dir = Path(data_dir)
        doc = load_layout_json(data_dir / f"{name}.json")
        image = load_qlt(data_dir / doc["image"])
        caption = caption_for(doc["count"], doc["category"])
        latent = image_to_latent(
            np.asarray(image, dtype=self.denoiser.w_in.data.dtype),
            self.denoiser.factor)
        bundle = self.condition(image, doc["boxes"], caption, prompt="")
        return image, latent, bundle

    def train(self, data_dir, steps: int | None = None, log_path=None,
              progress=None):
        """Train the adapter-branch weights on a scene directory.

        Returns the per-step loss list; writes a JSON-lines log when
        `log_path` is given.
        """
        data_dir = Path(data_dir)
        with open(data_dir / "index.json") as f:
            names = json.load(f)["scenes"]
        scenes = [self.load_scene(data_dir, n) for n in names]
        trainable = self.freeze()
        steps = steps if steps is not None else self.config.train_steps
        rng = Rng(self.config.seed).spawn("train")
        losses = []
        log = open(log_path, "w") if log_path else None
        try:
            for step in range(steps):
                _, latent, bundle = scenes[rng.randint(len(scenes))]
                for p in trainable:
                    p.zero_grad()
                res = training_step(self.denoiser, [latent], bundle, rng)
                adamw_step(trainable, lr=self.config.lr)
                losses.append(res.loss)
                if log:
                    log.write(json.dumps({"step": step, "loss": res.loss}) + "\n")
                if progress and (step + 1) % 100 == 0:
                    progress(step + 1, res.loss)
        finally:
            if log:
                log.close()
        return losses

    # ------------------------------------------------------------------
    def edit(self, image: np.ndarray, boxes, aux_caption: str, prompt: str,
             seed: int | None = None) -> np.ndarray:
        """Sample an edited image conditioned on the layout and prompt."""
        bundle = self.condition(image, boxes, aux_caption, prompt=prompt)
        rng = Rng(self.config.seed if seed is None else seed).spawn("sample")
        latent = sample(self.denoiser, bundle, self.config.cfg_w,
                        self.config.sample_steps, rng)
        return latent_to_image(latent, self.config.image_size,
                               self.denoiser.factor)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    return load_qlt(path)
