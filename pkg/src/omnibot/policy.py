"""The full policy: encoders + slot assembly + backbone + action heads."""

from __future__ import annotations

import numpy as np

from . import assembler, backbone, heads
from . import autodiff as ad
from .autodiff import Tensor
from .config import Config
from .datapipe import TrainingBatch
from .encoders import EncoderBank, init_encoder_params
from .errors import ContractError
from .rng import generator


class Policy:
    """One shared network controlling every embodiment."""

    def __init__(self, cfg: Config, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.layout = assembler.build_layout(cfg)
        self.bank = EncoderBank(params, cfg)
        self.head_specs = heads.head_specs(cfg)

    @staticmethod
    def init(cfg: Config, seed: int, dtype=np.float32) -> "Policy":
        layout = assembler.build_layout(cfg)
        params: dict[str, Tensor] = {}
        params.update(init_encoder_params(cfg, generator(seed, "init", "enc"), dtype))
        params.update(assembler.init_assembler_params(layout, generator(seed, "init", "asm"), dtype))
        params.update(backbone.init_backbone_params(cfg, generator(seed, "init", "bb"), dtype))
        params.update(heads.init_head_params(cfg, generator(seed, "init", "head"), dtype))
        return Policy(cfg, params)

    @property
    def dtype(self):
        return self.params["asm/pos"].data.dtype

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -------------------------------------------------------------

    def assemble(self, windows) -> assembler.AssembledWindow:
        return assembler.assemble_batch(windows, self.layout, self.bank, self.params)

    def embeddings(self, window: assembler.AssembledWindow) -> Tensor:
        return backbone.forward(window, self.params, self.cfg)

    def predict(self, batch: TrainingBatch) -> dict[str, Tensor]:
        """Per-head chunk predictions at every window step: [B, k, chunk, dim]."""
        window = self.assemble(batch.windows)
        emb = self.embeddings(window)
        out = {}
        for name in self.head_specs:
            tokens = backbone.gather_readouts(emb, self.layout, name)
            out[name] = heads.project(tokens, self.params, name)
        return out

    def loss(self, batch: TrainingBatch) -> Tensor:
        return heads.training_loss(self.predict(batch), batch.targets, batch.loss_masks)

    def validation_mse(self, batch: TrainingBatch) -> Tensor:
        with ad.no_grad():
            return heads.validation_mse(self.predict(batch), batch.targets, batch.loss_masks)

    # -- rollout -------------------------------------------------------------

    def act(self, frames, head: str) -> heads.ActionChunk:
        """Decode the newest valid step's readouts for one window of frames."""
        if head not in self.head_specs:
            raise ContractError(f"unknown head {head!r}")
        with ad.no_grad():
            window = self.assemble([frames])
            emb = self.embeddings(window)
            slices = backbone.readout_embeddings(emb, window, head)
            return heads.decode(slices[-1], self.params, self.head_specs[head])
