"""Neural models: LSTM caption decoder and the frozen bidirectional masked LM.

The decoder consumes a projected image feature vector at step 0 and then its
token sequence; it exposes the top-layer hidden state at every step. The
masked LM encodes a sequence with exactly one mask token by running a forward
recurrent encoder over the tokens left of the mask and a backward encoder over
the tokens right of it, combining both context states with an affine layer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam,
    Parameter,
    Tensor,
    affine,
    concat_last,
    dropout,
    gather_rows,
    no_grad,
    params_checksum,
    slice_last,
    softmax_xent_rows,
)
from .errors import ConfigError, InputError, StateError

PAD_ID = 0
START_ID = 1
EOS_ID = 2
UNK_ID = 3
MASK_ID = 4


@dataclass
class ModelConfig:
    """Dimensions and knobs shared by the decoder, fusion layer, and MLM."""

    vocab_size: int
    feature_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 128
    mlm_embed_dim: int = 64
    mlm_hidden_dim: int = 128
    fusion_kind: str = "none"
    fusion_dim: int = 128
    dropout: float = 0.5
    max_len: int = 40

    def validate(self):
        for name in ("vocab_size", "feature_dim", "embed_dim", "hidden_dim",
                     "mlm_embed_dim", "mlm_hidden_dim", "fusion_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size <= MASK_ID:
            raise ConfigError("vocab_size must cover the special token ids")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamStore:
    """Mixin keeping a name -> Parameter registry with unique names."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def checksum(self) -> str:
        return params_checksum(self.parameters())


class LstmCell:
    """Single LSTM layer; gate order is (input, forget, candidate, output)."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, hidden: int,
                 rng: np.random.Generator):
        self.hidden = hidden
        self.wx = store._param(f"{prefix}.Wx", xavier_uniform(rng, in_dim, 4 * hidden))
        self.wh = store._param(f"{prefix}.Wh", xavier_uniform(rng, hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate open at init
        self.b = store._param(f"{prefix}.b", bias)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = (x @ self.wx) + (h @ self.wh) + self.b
        n = self.hidden
        i = slice_last(z, 0, n).sigmoid()
        f = slice_last(z, n, 2 * n).sigmoid()
        g = slice_last(z, 2 * n, 3 * n).tanh()
        o = slice_last(z, 3 * n, 4 * n).sigmoid()
        c_new = (f * c) + (i * g)
        h_new = o * c_new.tanh()
        return h_new, c_new


def _zero_state(layers: int, batch: int, hidden: int):
    return [(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))
            for _ in range(layers)]


class CaptionDecoder(ParamStore):
    """Two-layer LSTM over token embeddings, conditioned on image features."""

    LAYERS = 2

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        v, e, h, f = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.feature_dim
        self.embed = self._param("decoder.embed", rng.uniform(-0.1, 0.1, size=(v, e)))
        self.img_w = self._param("decoder.image_proj.W", xavier_uniform(rng, f, e))
        self.img_b = self._param("decoder.image_proj.b", np.zeros(e))
        self.cells = [LstmCell(self, f"decoder.lstm{i}", e if i == 0 else h, h, rng)
                      for i in range(self.LAYERS)]
        self.head_w = self._param("decoder.head.W", xavier_uniform(rng, h, v))
        self.head_b = self._param("decoder.head.b", np.zeros(v))

    def initial_state(self, batch: int):
        return _zero_state(self.LAYERS, batch, self.cfg.hidden_dim)

    def encode_image(self, features: np.ndarray) -> Tensor:
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if feats.shape[-1] != self.cfg.feature_dim:
            raise ConfigError(
                f"feature dim {feats.shape[-1]} does not match model "
                f"feature_dim {self.cfg.feature_dim}"
            )
        return affine(Tensor(feats), self.img_w, self.img_b)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return gather_rows(self.embed, ids)

    def step(self, x: Tensor, state):
        """Advance all layers one step; returns the top-layer hidden state."""
        new_state = []
        inp = x
        for cell, (h, c) in zip(self.cells, state):
            h_new, c_new = cell.step(inp, h, c)
            new_state.append((h_new, c_new))
            inp = h_new
        return inp, new_state

    def head_logits(self, h_top: Tensor, training: bool, rng=None) -> Tensor:
        dropped = dropout(h_top, self.cfg.dropout, training, rng) if training else h_top
        return affine(dropped, self.head_w, self.head_b)


@dataclass
class MlmConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128

    def validate(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) < 1:
            raise ConfigError("MLM dims must be positive")
        if self.vocab_size <= MASK_ID:
            raise ConfigError("vocab_size must cover the special token ids")


class MaskedLM(ParamStore):
    """Bidirectional recurrent masked-token encoder with a diagnostic head.

    The state for a masked position combines the forward encoder run over the
    tokens strictly left of the mask with the backward encoder run over the
    tokens strictly right of it, so the output depends on every unmasked
    position but never on the mask token itself.
    """

    LAYERS = 2

    def __init__(self, cfg: MlmConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        v, e, h = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
        self.embed = self._param("mlm.embed", rng.uniform(-0.1, 0.1, size=(v, e)))
        self.fwd = [LstmCell(self, f"mlm.fwd{i}", e if i == 0 else h, h, rng)
                    for i in range(self.LAYERS)]
        self.bwd = [LstmCell(self, f"mlm.bwd{i}", e if i == 0 else h, h, rng)
                    for i in range(self.LAYERS)]
        self.comb_w = self._param("mlm.combine.W", xavier_uniform(rng, 2 * h, h))
        self.comb_b = self._param("mlm.combine.b", np.zeros(h))
        self.head_w = self._param("mlm.head.W", xavier_uniform(rng, h, v))
        self.head_b = self._param("mlm.head.b", np.zeros(v))

    # -- core encoding ----------------------------------------------------

    def _run_encoder(self, cells, token_matrix: np.ndarray):
        """Unroll one direction over a [batch x T] token matrix.

        Returns the top-layer hidden state after each step, as a list of
        [batch x hidden] tensors.
        """
        batch, steps = token_matrix.shape
        state = _zero_state(self.LAYERS, batch, self.cfg.hidden_dim)
        tops = []
        for t in range(steps):
            x = gather_rows(self.embed, token_matrix[:, t])
            new_state = []
            inp = x
            for cell, (h, c) in zip(cells, state):
                h_new, c_new = cell.step(inp, h, c)
                new_state.append((h_new, c_new))
                inp = h_new
            state = new_state
            tops.append(inp)
        return tops

    def combine(self, fwd_ctx: Tensor, bwd_ctx: Tensor) -> Tensor:
        return affine(concat_last(fwd_ctx, bwd_ctx), self.comb_w, self.comb_b)

    def encode_masked(self, tokens) -> Tensor:
        """Hidden state at the single [MASK] position of a token sequence."""
        tokens = list(tokens)
        positions = [i for i, t in enumerate(tokens) if t == MASK_ID]
        if len(positions) != 1:
            raise InputError(
                f"expected exactly one mask token, found {len(positions)}"
            )
        p = positions[0]
        h = self.cfg.hidden_dim
        prefix = tokens[:p]
        suffix = tokens[p + 1:]
        if prefix:
            fwd_ctx = self._run_encoder(self.fwd, np.asarray([prefix]))[-1]
        else:
            fwd_ctx = Tensor(np.zeros((1, h)))
        if suffix:
            bwd_ctx = self._run_encoder(self.bwd, np.asarray([suffix[::-1]]))[-1]
        else:
            bwd_ctx = Tensor(np.zeros((1, h)))
        return self.combine(fwd_ctx, bwd_ctx)

    def head_logits(self, state: Tensor) -> Tensor:
        return affine(state, self.head_w, self.head_b)

    # -- lifecycle ----------------------------------------------------------

    def freeze(self):
        for p in self.parameters():
            p.freeze()

    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())


def _padded_batch(seqs: list[list[int]]):
    """Pad sequences and build the per-sample reversed matrix for the
    backward encoder (reversal is per sample so padding stays on the right)."""
    batch = len(seqs)
    width = max(len(s) for s in seqs)
    toks = np.full((batch, width), PAD_ID, dtype=np.int64)
    rev = np.full((batch, width), PAD_ID, dtype=np.int64)
    lens = np.zeros(batch, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        lens[i] = n
        toks[i, :n] = s
        rev[i, :n] = s[::-1]
    return toks, rev, lens


def _select_steps(tops: list[Tensor], idx: np.ndarray) -> Tensor:
    """Per-sample selection of one time step from a list of [B x H] tensors.

    idx < 0 selects a zero vector (empty context). Implemented with indicator
    masks so gradients flow through the chosen steps only.
    """
    batch = tops[0].shape[0]
    out = Tensor(np.zeros((batch, tops[0].shape[1])))
    for t, top in enumerate(tops):
        mask = (idx == t).astype(np.float64)
        if mask.any():
            out = out + top * Tensor(np.repeat(mask[:, None], top.shape[1], axis=1))
    return out


def mlm_context_rows(mlm: MaskedLM, seqs: list[list[int]],
                     append_row: bool = False, chunk: int = 512) -> list[np.ndarray]:
    """Masked-position states for every maskable position of each sequence.

    For a sequence of length L the result has one row per mask position
    p = 1..L-1 (position 0 is never masked in training or emendation). With
    append_row=True an extra final row encodes the variant where the mask is
    inserted between the last content token and the trailing end token.
    Computed under no_grad; the outputs are plain arrays.
    """
    out: list[np.ndarray] = []
    for lo in range(0, len(seqs), chunk):
        out.extend(_context_rows_chunk(mlm, seqs[lo:lo + chunk], append_row))
    return out


def _context_rows_chunk(mlm: MaskedLM, seqs, append_row: bool) -> list[np.ndarray]:
    if not seqs:
        return []
    h = mlm.cfg.hidden_dim
    with no_grad():
        toks, rev, lens = _padded_batch(seqs)
        fwd_tops = mlm._run_encoder(mlm.fwd, toks)
        bwd_tops = mlm._run_encoder(mlm.bwd, rev)
        fwd_np = np.stack([t.data for t in fwd_tops], axis=1)  # [B x T x H]
        bwd_np = np.stack([t.data for t in bwd_tops], axis=1)
        pairs = []
        counts = []
        for i, n in enumerate(lens):
            n = int(n)
            rows = 0
            for p in range(1, n):
                f = fwd_np[i, p - 1]
                b = bwd_np[i, n - 2 - p] if p <= n - 2 else np.zeros(h)
                pairs.append(np.concatenate([f, b]))
                rows += 1
            if append_row and n >= 2:
                # mask inserted after the final pre-end token: forward context
                # is the whole prefix up to that token, backward context is the
                # end token alone
                pairs.append(np.concatenate([fwd_np[i, n - 2], bwd_np[i, 0]]))
                rows += 1
            counts.append(rows)
        if not pairs:
            return [np.zeros((0, h)) for _ in seqs]
        combined = affine(Tensor(np.asarray(pairs)), mlm.comb_w, mlm.comb_b).data
        out = []
        offset = 0
        for rows in counts:
            out.append(combined[offset:offset + rows])
            offset += rows
    return out


@dataclass
class MlmPretrainConfig:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class MlmPretrainReport:
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    wall_clock_sec: float = 0.0


def _masked_batch_loss(mlm: MaskedLM, seqs: list[list[int]],
                       positions: np.ndarray) -> Tensor:
    """Mean cross-entropy of predicting the token at one masked position
    per sequence (the mask position is never 0)."""
    toks, rev, lens = _padded_batch(seqs)
    fwd_tops = mlm._run_encoder(mlm.fwd, toks)
    bwd_tops = mlm._run_encoder(mlm.bwd, rev)
    fwd_idx = positions - 1
    bwd_idx = np.where(positions <= lens - 2, lens - 2 - positions, -1)
    fwd_ctx = _select_steps(fwd_tops, fwd_idx)
    bwd_ctx = _select_steps(bwd_tops, bwd_idx)
    state = mlm.combine(fwd_ctx, bwd_ctx)
    logits = mlm.head_logits(state)
    targets = toks[np.arange(len(seqs)), positions]
    return softmax_xent_rows(logits, targets).sum() * (1.0 / len(seqs))


def mlm_pretrain(mlm: MaskedLM, corpus: list[list[int]],
                 cfg: MlmPretrainConfig | None = None):
    """Train the masked LM on a token corpus, then freeze every parameter.

    Each epoch visits every sequence once, masking one uniformly chosen
    position per sequence (excluding position 0, which is never queried
    downstream). Returns (mlm, report).
    """
    cfg = cfg or MlmPretrainConfig()
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise InputError("masked LM pretraining needs a non-empty corpus "
                         "of sequences with at least 2 tokens")
    if mlm.frozen():
        raise StateError("masked LM is already frozen")
    started = time.perf_counter()
    seed_seq = np.random.SeedSequence(cfg.seed)
    shuffle_rng, mask_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    opt = Adam(mlm.parameters(), lr=cfg.lr)

    with no_grad():
        probe = corpus[: min(len(corpus), cfg.batch_size)]
        pos = np.asarray([1] * len(probe))
        initial_loss = _masked_batch_loss(mlm, probe, pos).item()

    report = MlmPretrainReport(initial_loss=initial_loss)
    order = np.arange(len(corpus))
    for _ in range(cfg.epochs):
        shuffle_rng.shuffle(order)
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            seqs = [corpus[i] for i in idx]
            positions = np.asarray(
                [int(mask_rng.integers(1, len(s))) for s in seqs]
            )
            loss = _masked_batch_loss(mlm, seqs, positions)
            loss.backward()
            opt.step()
            total += loss.item() * len(seqs)
            count += len(seqs)
        report.epoch_losses.append(total / count)
    mlm.freeze()
    report.wall_clock_sec = time.perf_counter() - started
    return mlm, report


def mlm_masked_accuracy(mlm: MaskedLM, corpus: list[list[int]]) -> float:
    """Fraction of maskable positions whose token the head predicts exactly."""
    hits, total = 0, 0
    rows_per_seq = mlm_context_rows(mlm, [list(s) for s in corpus])
    with no_grad():
        for seq, rows in zip(corpus, rows_per_seq):
            if len(seq) < 2:
                continue
            logits = affine(Tensor(rows), mlm.head_w, mlm.head_b).data
            pred = logits.argmax(axis=1)
            for p in range(1, len(seq)):
                hits += int(pred[p - 1] == seq[p])
                total += 1
    return hits / max(total, 1)
