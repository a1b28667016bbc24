"""Sequence models: weight-dropped LSTM encoder, tied next-token decoder,
pooled classification head.

Regularization is all mask-based and train-only:
  - embedding dropout zeroes whole rows of the embedding matrix per forward
    pass (a dropped token id embeds to zero everywhere it appears);
  - variational dropout draws one (1, B, d) mask per sequence per site and
    reuses it at every time step;
  - weight drop (DropConnect) zeroes entries of each layer's recurrent
    matrix, one mask per forward pass shared by all time steps.
Survivors are scaled by 1/(1-p), so evaluation is plain identity.

Masks are drawn from an explicit rng in a fixed order (build_masks), which
is what makes gradient checks and same-seed reruns exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import Parameter, Tensor


class TransferError(RuntimeError):
    pass


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(a, 0.0)) / (1.0 + np.exp(-np.abs(a)))


def lstm_cell_step(x, h, c, wx, wh, b):
    """One LSTM time step on plain arrays; returns (h_new, c_new).

    Gate order along the packed 4H axis: input, forget, cell, output.
    i = sig(a_i), f = sig(a_f), g = tanh(a_g), o = sig(a_o);
    c' = f*c + i*g; h' = o*tanh(c').
    """
    a = x @ wx + h @ wh + b
    H = wh.shape[0]
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = _sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def keep_mask(rng: np.random.Generator, shape, p: float, dtype=np.float64) -> np.ndarray:
    """0/1 keep mask with drop probability p."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability out of range: {p}")
    return (rng.random(shape) >= p).astype(dtype)


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, h0, c0):
    """Fused LSTM graph node over x (T, B, D).

    Returns (out, (h_last, c_last)): out is a (T, B, H) Tensor on the tape;
    the final state is detached numpy, ready to carry into the next window.
    """
    h_seq, c_seq, gates = K.lstm_seq_forward(x.data, wx.data, wh.data, b.data, h0, c0)
    out = Tensor(h_seq, (x, wx, wh, b))

    def bw():
        dx, dwx, dwh, db, _, _ = K.lstm_seq_backward(
            out.grad, x.data, wx.data, wh.data, h0, c0, h_seq, c_seq, gates
        )
        x.accumulate(dx)
        wx.accumulate(dwx)
        wh.accumulate(dwh)
        b.accumulate(db)

    out._backward = bw
    return out, (h_seq[-1].copy(), c_seq[-1].copy())


@dataclass
class Dropouts:
    emb: float = 0.05
    input: float = 0.3
    hidden: float = 0.3
    weight: float = 0.5
    head: float = 0.1

    def scaled(self, factor: float) -> "Dropouts":
        return replace(
            self,
            emb=self.emb * factor,
            input=self.input * factor,
            hidden=self.hidden * factor,
            weight=self.weight * factor,
            head=self.head * factor,
        )


@dataclass
class EncoderMasks:
    """One training forward pass worth of dropout masks."""

    emb_rows: np.ndarray | None
    input_mask: np.ndarray | None
    wh_masks: list  # per layer, mask or None
    between: list  # per layer gap (n_layers - 1 entries), mask or None


class LstmLayer:
    def __init__(self, index: int, d_in: int, hidden: int, dtype, rng):
        bound = 1.0 / np.sqrt(hidden)
        group = index + 1  # group 0 is the embedding
        self.hidden = hidden
        self.wx = Parameter(
            rng.uniform(-bound, bound, (d_in, 4 * hidden)).astype(dtype),
            f"lstm{index}.wx", group,
        )
        self.wh = Parameter(
            rng.uniform(-bound, bound, (hidden, 4 * hidden)).astype(dtype),
            f"lstm{index}.wh", group,
        )
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0  # forget gate starts open
        self.b = Parameter(b, f"lstm{index}.b", group)

    def params(self) -> list[Parameter]:
        return [self.wx, self.wh, self.b]


class Encoder:
    """Stacked weight-dropped LSTM over embedded token ids.

    With tie_last (the default) the last layer's width equals the embedding
    size so a decoder can share the embedding matrix.
    """

    def __init__(
        self,
        vocab_size: int,
        emb_size: int = 64,
        hidden_size: int = 64,
        n_layers: int = 3,
        dropouts: Dropouts | None = None,
        tie_last: bool = True,
        dtype=np.float32,
        seed: int = 0,
    ):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.emb_size = emb_size
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.tie_last = tie_last
        self.dropouts = dropouts or Dropouts()
        self.dtype = np.dtype(dtype)
        self.emb = Parameter(
            rng.uniform(-0.1, 0.1, (vocab_size, emb_size)).astype(self.dtype), "emb", 0
        )
        self.layers: list[LstmLayer] = []
        d_in = emb_size
        for l in range(n_layers):
            hidden = emb_size if (tie_last and l == n_layers - 1) else hidden_size
            self.layers.append(LstmLayer(l, d_in, hidden, self.dtype, rng))
            d_in = hidden
        self.out_size = d_in

    def parameters(self) -> list[Parameter]:
        out = [self.emb]
        for layer in self.layers:
            out.extend(layer.params())
        return out

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def initial_state(self, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (
                np.zeros((batch_size, layer.hidden), dtype=self.dtype),
                np.zeros((batch_size, layer.hidden), dtype=self.dtype),
            )
            for layer in self.layers
        ]

    def build_masks(self, rng: np.random.Generator, batch_size: int) -> EncoderMasks:
        """Draw one forward pass worth of masks, in a fixed order."""
        d = self.dropouts
        emb_rows = (
            keep_mask(rng, (self.vocab_size, 1), d.emb, self.dtype) if d.emb else None
        )
        input_mask = (
            keep_mask(rng, (1, batch_size, self.emb_size), d.input, self.dtype)
            if d.input
            else None
        )
        wh_masks = []
        between = []
        for l, layer in enumerate(self.layers):
            wh_masks.append(
                keep_mask(rng, layer.wh.shape, d.weight, self.dtype) if d.weight else None
            )
            if l < self.n_layers - 1:
                between.append(
                    keep_mask(rng, (1, batch_size, layer.hidden), d.hidden, self.dtype)
                    if d.hidden
                    else None
                )
        return EncoderMasks(emb_rows, input_mask, wh_masks, between)

    def embed(self, ids: np.ndarray, masks: EncoderMasks | None = None) -> Tensor:
        """Token ids (T, B) -> embedded inputs (T, B, emb_size).

        Applies embedding dropout (whole rows) then the input-site
        variational mask when masks are given.
        """
        d = self.dropouts
        emb_weights = self.emb
        if masks and masks.emb_rows is not None:
            emb_weights = ad.apply_mask(self.emb, masks.emb_rows, 1.0 / (1.0 - d.emb))
        x = ad.embedding_lookup(emb_weights, ids)
        if masks and masks.input_mask is not None:
            x = ad.apply_mask(x, masks.input_mask, 1.0 / (1.0 - d.input))
        return x

    def forward(
        self,
        ids: np.ndarray,
        state: list | None = None,
        masks: EncoderMasks | None = None,
    ) -> tuple[Tensor, list]:
        """ids (T, B) int -> hidden outputs (T, B, out_size), new state.

        masks=None is evaluation mode. The returned state is detached; pass
        it back in to carry across consecutive windows of the same streams.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("ids must be (T, B)")
        if state is None:
            state = self.initial_state(ids.shape[1])
        d = self.dropouts
        x = self.embed(ids, masks)
        new_state = []
        for l, layer in enumerate(self.layers):
            wh = layer.wh
            if masks and masks.wh_masks[l] is not None:
                wh = ad.apply_mask(layer.wh, masks.wh_masks[l], 1.0 / (1.0 - d.weight))
            h0, c0 = state[l]
            x, last = lstm_sequence(x, layer.wx, wh, layer.b, h0, c0)
            new_state.append(last)
            if l < self.n_layers - 1 and masks and masks.between[l] is not None:
                x = ad.apply_mask(x, masks.between[l], 1.0 / (1.0 - d.hidden))
        return x, new_state

    def copy_values_from(self, other: "Encoder") -> None:
        mine = self.parameters()
        theirs = other.parameters()
        for a, b in zip(mine, theirs):
            if a.shape != b.shape:
                raise TransferError(f"shape mismatch for {a.name}: {a.shape} vs {b.shape}")
            a.data = b.data.copy()


class LanguageModel:
    """Encoder plus next-token decoder. The decoder projection is the
    embedding matrix itself when tied (mutating one mutates the other)."""

    def __init__(self, encoder: Encoder, vocab_hash: str | None = None, seed: int = 1):
        self.encoder = encoder
        self.vocab_hash = vocab_hash
        rng = np.random.default_rng(seed)
        dec_group = encoder.n_layers + 1
        if encoder.tie_last:
            self.dec_w = None
        else:
            bound = 1.0 / np.sqrt(encoder.out_size)
            self.dec_w = Parameter(
                rng.uniform(-bound, bound, (encoder.out_size, encoder.vocab_size)).astype(
                    encoder.dtype
                ),
                "decoder.w", dec_group,
            )
        self.dec_b = Parameter(
            np.zeros(encoder.vocab_size, dtype=encoder.dtype), "decoder.b", dec_group
        )

    @property
    def n_groups(self) -> int:
        return self.encoder.n_layers + 2

    def parameters(self) -> list[Parameter]:
        out = self.encoder.parameters()
        if self.dec_w is not None:
            out.append(self.dec_w)
        out.append(self.dec_b)
        return out

    def forward(
        self,
        ids: np.ndarray,
        state: list | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, list]:
        """ids (T, B) -> logits (T*B, vocab), new state."""
        enc = self.encoder
        masks = None
        out_mask = None
        if train:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            masks = enc.build_masks(rng, ids.shape[1])
            if enc.dropouts.hidden:
                out_mask = keep_mask(
                    rng, (1, ids.shape[1], enc.out_size), enc.dropouts.hidden, enc.dtype
                )
        out, new_state = enc.forward(ids, state, masks)
        if out_mask is not None:
            out = ad.apply_mask(out, out_mask, 1.0 / (1.0 - enc.dropouts.hidden))
        flat = ad.reshape(out, (-1, enc.out_size))
        proj = ad.transpose(enc.emb) if self.dec_w is None else self.dec_w
        logits = ad.add(ad.matmul(flat, proj), self.dec_b)
        return logits, new_state

    def loss(
        self,
        ids: np.ndarray,
        targets: np.ndarray,
        state: list | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        ignore_id: int | None = 0,
    ) -> tuple[Tensor, list]:
        logits, new_state = self.forward(ids, state, train, rng)
        loss = ad.cross_entropy(logits, np.asarray(targets).reshape(-1), ignore_id)
        return loss, new_state


class Classifier:
    """Encoder plus pooled head: concat(last, max, mean) -> hidden -> logits."""

    def __init__(
        self,
        encoder: Encoder,
        n_classes: int = 4,
        head_hidden: int = 50,
        vocab_hash: str | None = None,
        seed: int = 2,
    ):
        self.encoder = encoder
        self.n_classes = n_classes
        self.head_hidden = head_hidden
        self.vocab_hash = vocab_hash
        rng = np.random.default_rng(seed)
        group = encoder.n_layers + 1
        rep = 3 * encoder.out_size
        b1 = 1.0 / np.sqrt(rep)
        b2 = 1.0 / np.sqrt(head_hidden)
        self.w1 = Parameter(
            rng.uniform(-b1, b1, (rep, head_hidden)).astype(encoder.dtype), "head.w1", group
        )
        self.b1 = Parameter(np.zeros(head_hidden, dtype=encoder.dtype), "head.b1", group)
        self.w2 = Parameter(
            rng.uniform(-b2, b2, (head_hidden, n_classes)).astype(encoder.dtype),
            "head.w2", group,
        )
        self.b2 = Parameter(np.zeros(n_classes, dtype=encoder.dtype), "head.b2", group)

    @property
    def n_groups(self) -> int:
        return self.encoder.n_layers + 2

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + [self.w1, self.b1, self.w2, self.b2]

    def head_parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(
        self,
        ids: np.ndarray,
        lengths: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """ids (T, B) left-aligned with trailing padding, lengths (B,) -> logits (B, K).

        Pooling only reads positions before each sequence's length, so
        trailing padding can never change the logits.
        """
        ids = np.asarray(ids)
        lengths = np.asarray(lengths, dtype=np.int64)
        T, B = ids.shape
        enc = self.encoder
        masks = None
        head_mask = None
        if train:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            masks = enc.build_masks(rng, B)
            if enc.dropouts.head:
                head_mask = keep_mask(rng, (B, self.head_hidden), enc.dropouts.head, enc.dtype)
        out, _ = enc.forward(ids, None, masks)
        if train and enc.frozen:
            out = Tensor(out.data)  # nothing upstream can train: cut the tape
        valid = (np.arange(T)[:, None] < lengths[None, :]).astype(enc.dtype)
        rep = ad.concat(
            [
                ad.last_over_time(out, lengths),
                ad.masked_max_over_time(out, valid),
                ad.masked_mean_over_time(out, valid),
            ],
            axis=1,
        )
        hid = ad.relu(ad.add(ad.matmul(rep, self.w1), self.b1))
        if head_mask is not None:
            hid = ad.apply_mask(hid, head_mask, 1.0 / (1.0 - enc.dropouts.head))
        return ad.add(ad.matmul(hid, self.w2), self.b2)

    def loss(self, ids, lengths, labels, train=False, rng=None) -> Tensor:
        logits = self.forward(ids, lengths, train, rng)
        return ad.cross_entropy(logits, np.asarray(labels), ignore_id=None)

    def predict_proba(self, ids, lengths) -> np.ndarray:
        logits = self.forward(ids, lengths).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def transfer_encoder(
    lm: LanguageModel,
    vocab_hash: str | None = None,
    n_classes: int = 4,
    head_hidden: int = 50,
    dropouts: Dropouts | None = None,
    seed: int = 2,
) -> Classifier:
    """Classifier whose encoder starts from the LM's encoder values.

    The encoder arrives frozen (training stage 0); unfreeze gradually via
    trainer.gradual_unfreeze. vocab_hash, when both sides carry one, must
    match the LM's: transferring across vocabularies is an error.
    """
    src = lm.encoder
    if vocab_hash is not None and lm.vocab_hash is not None and vocab_hash != lm.vocab_hash:
        raise TransferError(
            f"vocabulary mismatch: LM was built on {lm.vocab_hash[:12]}, "
            f"classifier corpus hashes to {vocab_hash[:12]}"
        )
    enc = Encoder(
        vocab_size=src.vocab_size,
        emb_size=src.emb_size,
        hidden_size=src.hidden_size,
        n_layers=src.n_layers,
        dropouts=dropouts or src.dropouts,
        tie_last=src.tie_last,
        dtype=src.dtype,
        seed=seed,
    )
    enc.copy_values_from(src)
    for p in enc.parameters():
        p.frozen = True
    return Classifier(
        enc,
        n_classes=n_classes,
        head_hidden=head_hidden,
        vocab_hash=vocab_hash if vocab_hash is not None else lm.vocab_hash,
        seed=seed,
    )
