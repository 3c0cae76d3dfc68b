"""Fusion layers combining decoder and masked-LM hidden states into logits.

Three schemes are supported. Simple fusion concatenates both states and
applies one gated projection. Cold fusion first projects the LM state, gates
it with a learned relu gate, and re-projects the concatenation. Hierarchical
fusion applies two elementwise relu gates to the concatenated states and
stacks two gated-linear-unit layers. Every scheme ends in the same
dropout + vocabulary head, and all gates use relu.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, affine, concat_last, dropout, glu
from .errors import ConfigError
from .models import (
    CaptionDecoder,
    MaskedLM,
    MlmConfig,
    ModelConfig,
    ParamStore,
    xavier_uniform,
)


class FusionKind(str, Enum):
    NONE = "none"
    SIMPLE = "simple"
    COLD = "cold"
    HIER = "hier"

    @classmethod
    def from_name(cls, name: str) -> "FusionKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown fusion kind {name!r}; valid: {valid}") from None


@dataclass
class FusionOutput:
    features: Tensor  # fused representation fed to the vocabulary head
    logits: Tensor


class FusionLayer(ParamStore):
    """Trainable fusion parameters for one scheme plus the vocabulary head."""

    def __init__(self, kind: FusionKind, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if kind == FusionKind.NONE:
            raise ConfigError("fusion kind 'none' has no fusion layer")
        self.kind = kind
        self.cfg = cfg
        h, m, d = cfg.hidden_dim, cfg.mlm_hidden_dim, cfg.fusion_dim
        v = cfg.vocab_size
        if kind == FusionKind.SIMPLE:
            self.gate_w = self._param("fusion.sf.gate.W", xavier_uniform(rng, h + m, d))
            self.gate_b = self._param("fusion.sf.gate.b", np.zeros(d))
            out_dim = d
        elif kind == FusionKind.COLD:
            self.lm_w = self._param("fusion.cf.lm_proj.W", xavier_uniform(rng, m, d))
            self.lm_b = self._param("fusion.cf.lm_proj.b", np.zeros(d))
            self.gate_w = self._param("fusion.cf.gate.W", xavier_uniform(rng, h + d, d))
            self.gate_b = self._param("fusion.cf.gate.b", np.zeros(d))
            self.merge_w = self._param("fusion.cf.merge.W", xavier_uniform(rng, h + d, d))
            self.merge_b = self._param("fusion.cf.merge.b", np.zeros(d))
            out_dim = d
        else:  # hierarchical
            full = m + h
            self.left_w = self._param("fusion.hf.left.W", xavier_uniform(rng, full, full))
            self.left_b = self._param("fusion.hf.left.b", np.zeros(full))
            self.right_w = self._param("fusion.hf.right.W", xavier_uniform(rng, full, full))
            self.right_b = self._param("fusion.hf.right.b", np.zeros(full))
            self.expand_w = self._param("fusion.hf.expand.W", xavier_uniform(rng, full, 2 * full))
            self.expand_b = self._param("fusion.hf.expand.b", np.zeros(2 * full))
            out_dim = full
        self.out_dim = out_dim
        self.out_w = self._param("fusion.out.W", xavier_uniform(rng, out_dim, v))
        self.out_b = self._param("fusion.out.b", np.zeros(v))

    # -- schemes ------------------------------------------------------------

    def _head(self, features: Tensor, training: bool, rng) -> Tensor:
        dropped = dropout(features, self.cfg.dropout, training, rng) if training else features
        return affine(dropped, self.out_w, self.out_b)

    def simple_fuse(self, h_lstm: Tensor, h_mlm: Tensor,
                    training: bool = False, rng=None) -> FusionOutput:
        """Relu-gated projection of the concatenated hidden states."""
        fused = affine(concat_last(h_lstm, h_mlm), self.gate_w, self.gate_b).relu()
        return FusionOutput(fused, self._head(fused, training, rng))

    def cold_fuse(self, h_lstm: Tensor, h_mlm: Tensor,
                  training: bool = False, rng=None) -> FusionOutput:
        """Gated modulation of a projected LM state, then a merge projection."""
        h_lm = affine(h_mlm, self.lm_w, self.lm_b).relu()
        gate = affine(concat_last(h_lstm, h_lm), self.gate_w, self.gate_b).relu()
        h_cf = concat_last(h_lstm, gate * h_lm)
        r_cf = affine(h_cf, self.merge_w, self.merge_b).relu()
        return FusionOutput(r_cf, self._head(r_cf, training, rng))

    def hier_fuse(self, h_lstm: Tensor, h_mlm: Tensor,
                  training: bool = False, rng=None) -> FusionOutput:
        """Dual relu gates over the concatenation, then two GLU stages.

        Note the concatenation order here puts the LM state first.
        """
        h_c = concat_last(h_mlm, h_lstm)
        g_left = affine(h_c, self.left_w, self.left_b).relu() * h_c
        g_right = h_c * affine(h_c, self.right_w, self.right_b).relu()
        g_c = glu(concat_last(g_left, g_right))
        g_f = glu(affine(g_c, self.expand_w, self.expand_b))
        return FusionOutput(g_f, self._head(g_f, training, rng))

    def fused_logits(self, h_lstm: Tensor, h_mlm: Tensor,
                     training: bool = False, rng=None) -> Tensor:
        return self.fuse(h_lstm, h_mlm, training, rng).logits

    def fuse(self, h_lstm: Tensor, h_mlm: Tensor,
             training: bool = False, rng=None) -> FusionOutput:
        if self.kind == FusionKind.SIMPLE:
            return self.simple_fuse(h_lstm, h_mlm, training, rng)
        if self.kind == FusionKind.COLD:
            return self.cold_fuse(h_lstm, h_mlm, training, rng)
        return self.hier_fuse(h_lstm, h_mlm, training, rng)


class CaptionModel:
    """Decoder plus optional fusion layer; the unit that gets checkpointed."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.kind = FusionKind.from_name(cfg.fusion_kind)
        self.decoder = CaptionDecoder(cfg, rng)
        self.fusion = None if self.kind == FusionKind.NONE else FusionLayer(self.kind, cfg, rng)

    def parameters(self):
        params = self.decoder.parameters()
        if self.fusion is not None:
            params.extend(self.fusion.parameters())
        return params

    def trainable_parameters(self):
        """Parameters updated during training.

        For fusion models the decoder's own vocabulary head is bypassed (the
        fusion head produces the logits), so it is excluded here.
        """
        if self.fusion is None:
            return self.decoder.parameters()
        skip = {"decoder.head.W", "decoder.head.b"}
        params = [p for p in self.decoder.parameters() if p.name not in skip]
        params.extend(self.fusion.parameters())
        return params

    def step_logits(self, h_top: Tensor, h_mlm: Tensor | None,
                    training: bool = False, rng=None) -> Tensor:
        if self.fusion is None:
            return self.decoder.head_logits(h_top, training, rng)
        if h_mlm is None:
            raise ConfigError("fusion model needs a masked-LM state per step")
        return self.fusion.fused_logits(h_top, h_mlm, training, rng)

    def needs_mlm(self) -> bool:
        return self.fusion is not None


def build_model(cfg: ModelConfig, seed: int) -> CaptionModel:
    return CaptionModel(cfg, np.random.default_rng(np.random.SeedSequence(seed)))


def build_mlm(cfg: MlmConfig, seed: int) -> MaskedLM:
    return MaskedLM(cfg, np.random.default_rng(np.random.SeedSequence(seed)))
