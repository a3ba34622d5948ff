"""
Masked trajectory model.

Each (timestep, modality) cell is lifted by its modality's projection, then a fixed
sinusoidal time encoding and a learned mode embedding are added. Only visible tokens enter
the encoder. The decoder sees the full grid: encoder outputs in visible slots and the
modality's mask token (plus time and mode embeddings) elsewhere. One head per modality maps
decoder latents back to raw values.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .constants import KEY_PADDING_BIAS, MODALITIES, TIME_ENCODING_BASE
from .diffcore import Tensor
from .exceptions import ConfigError, MaskError, ShapeError
from .layers import LayerNorm, Linear, MLP, Module, TransformerBlock, trunc_normal
from .trajdata import SegmentBatch
from .utils import get_logger, seed_streams

logger = get_logger('model')

PRECISIONS = {'float32': np.float32, 'float64': np.float64}


@dataclass
class ModelConfig:
    embed_dim: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    n_heads: int = 4
    head_hidden_layers: int = 2
    dropout: float = 0.1
    segment_length: int = 4
    ff_mult: int = 4
    init_std: float = 0.02
    precision: str = 'float32'
    # filled from the environment when left at 0
    state_dim: int = 0
    action_dim: int = 0
    rtg_dim: int = 1

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % self.n_heads:
            raise ConfigError('model.embed_dim', '{0} is not a positive multiple of n_heads={1}'.format(
                self.embed_dim, self.n_heads))
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigError('model.n_enc_layers', 'encoder and decoder need at least one block')
        if self.head_hidden_layers < 0:
            raise ConfigError('model.head_hidden_layers', 'must be non-negative')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError('model.dropout', 'must lie in [0, 1)')
        if self.segment_length < 1:
            raise ConfigError('model.segment_length', 'must be at least 1')
        if self.precision not in PRECISIONS:
            raise ConfigError('model.precision', 'expected one of {0}'.format(sorted(PRECISIONS)))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def input_dims(self) -> Tuple[int, int, int]:
        return self.rtg_dim, self.state_dim, self.action_dim


def sinusoidal_time_encoding(length: int, dim: int, base: float = TIME_ENCODING_BASE) -> np.ndarray:
    """Interleaved table: column ``2i`` is ``sin(t / base^(2i/dim))``, column ``2i+1`` the cosine."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions * freqs[None, :]
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


@dataclass
class EncodedBatch:
    """Encoder output for the visible tokens of each row, padded to ``latents.shape[1]``."""
    latents: Tensor
    visible_index: np.ndarray
    valid: np.ndarray


class MtmModel(Module):
    """
    Bidirectional encoder-decoder over the (t, modality) token grid.

    Args:
        config (ModelConfig): Architecture; ``state_dim`` and ``action_dim`` must be set.
        seed (int): Seeds initialization and the dropout stream.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.state_dim <= 0 or config.action_dim <= 0:
            raise ConfigError('model.state_dim', 'state_dim and action_dim must be set before building a model')
        self.config = config
        init_rng, dropout_rng = seed_streams(seed, 2)
        self.dropout_rng = dropout_rng
        d, dtype, std = config.embed_dim, config.dtype, config.init_std
        self.tokenizers = {name: Linear(dim, d, init_rng, std, dtype=dtype)
                           for name, dim in zip(MODALITIES, config.input_dims())}
        self.mode_embed = Tensor(trunc_normal((3, d), std, init_rng, dtype), requires_grad=True, name='mode_embed')
        self.mask_token = Tensor(trunc_normal((3, d), std, init_rng, dtype), requires_grad=True, name='mask_token')
        self.encoder = [TransformerBlock(d, config.n_heads, config.dropout, config.ff_mult, init_rng,
                                         dropout_rng, std, dtype) for _ in range(config.n_enc_layers)]
        self.encoder_norm = LayerNorm(d, dtype)
        self.decoder_embed = Linear(d, d, init_rng, std, dtype=dtype)
        self.decoder = [TransformerBlock(d, config.n_heads, config.dropout, config.ff_mult, init_rng,
                                         dropout_rng, std, dtype) for _ in range(config.n_dec_layers)]
        self.decoder_norm = LayerNorm(d, dtype)
        self.heads = {name: MLP(d, [d] * config.head_hidden_layers, dim, init_rng, activation='gelu',
                                layer_norm=True, std=std, dtype=dtype)
                      for name, dim in zip(MODALITIES, config.input_dims())}
        self.time_table = sinusoidal_time_encoding(config.segment_length, d).astype(dtype)

    @property
    def segment_length(self) -> int:
        return self.config.segment_length

    def _grid_mask(self, mask: np.ndarray, batch_size: int) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (batch_size,) + mask.shape)
        if mask.shape != (batch_size, self.segment_length, 3):
            raise ShapeError('mask shape {0} does not match grid {1}'.format(
                mask.shape, (batch_size, self.segment_length, 3)))
        return mask

    def tokenize(self, batch: SegmentBatch, mask: np.ndarray) -> Tensor:
        """Token grid (B, L, 3, D); hidden raw values are zeroed before projection."""
        b, length = batch.batch_size, batch.length
        if length != self.segment_length:
            raise ShapeError('segment length {0} does not match model length {1}'.format(length, self.segment_length))
        mask = self._grid_mask(mask, b)
        d = self.config.embed_dim
        tokens = []
        for m, name in enumerate(MODALITIES):
            raw = np.asarray(batch.modality(m), dtype=self.config.dtype)
            tokenizer = self.tokenizers[name]
            if raw.shape[-1] != tokenizer.in_dim:
                raise ShapeError('tokenize: {0} has {1} dims, projection expects {2}'.format(
                    name, raw.shape[-1], tokenizer.in_dim))
            clean = dc.where(mask[:, :, m, None], Tensor(raw), 0.0)
            emb = dc.add(tokenizer(clean), self.time_table)
            emb = dc.add(emb, dc.slice_(self.mode_embed, m))
            tokens.append(dc.reshape(emb, (b, length, 1, d)))
        return dc.concat(tokens, axis=2)

    def encode(self, tokens: Tensor, mask: np.ndarray) -> EncodedBatch:
        """
        Runs the encoder over the visible tokens only.

        Visible tokens are gathered in (t, modality) order and right-padded to the longest
        row; padding slots are excluded as keys through an additive bias.
        """
        b, length, _, d = tokens.shape
        mask = self._grid_mask(mask, b)
        flat_mask = mask.reshape(b, 3 * length)
        counts = flat_mask.sum(axis=1)
        if np.any(counts == 0):
            raise MaskError('encode: rows {0} have no visible token'.format(np.flatnonzero(counts == 0).tolist()))
        n_max = int(counts.max())
        pad_row = b * 3 * length
        index = np.full((b, n_max), pad_row, dtype=np.int64)
        valid = np.zeros((b, n_max), dtype=bool)
        for i in range(b):
            cells = np.flatnonzero(flat_mask[i])
            index[i, :cells.size] = i * 3 * length + cells
            valid[i, :cells.size] = True
        source = dc.concat([dc.reshape(tokens, (b * 3 * length, d)), np.zeros((1, d), dtype=tokens.dtype)])
        x = dc.gather(source, index)
        key_bias = np.where(valid, 0.0, KEY_PADDING_BIAS).astype(tokens.dtype)[:, None, None, :]
        return EncodedBatch(latents=self.encode_sequence(x, key_bias), visible_index=index, valid=valid)

    def embed_cell(self, modality: int, values: Tensor, t: int = 0) -> Tensor:
        """Token of one cell per row: ``values`` is (B, dim) in normalized units, ``t`` 0-based."""
        emb = dc.add(self.tokenizers[MODALITIES[modality]](values), self.time_table[t])
        return dc.add(emb, dc.slice_(self.mode_embed, modality))

    def encode_sequence(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tensor:
        """Encoder blocks and final norm over an already-gathered (B, N, D) token sequence."""
        for block in self.encoder:
            x = block(x, key_bias)
        return self.encoder_norm(x)

    def decode(self, encoded: EncodedBatch, mask: np.ndarray) -> Tensor:
        """Full-grid decoder latents (B, L, 3, D)."""
        b, n_max, d = encoded.latents.shape
        length = self.segment_length
        mask = self._grid_mask(mask, b)
        flat_mask = mask.reshape(b, 3 * length)
        dec_in = dc.reshape(self.decoder_embed(encoded.latents), (b * n_max, d))
        fill = dc.add(dc.reshape(self.mask_token, (1, 3, d)), self.time_table[:, None, :])
        fill = dc.reshape(dc.add(fill, dc.reshape(self.mode_embed, (1, 3, d))), (3 * length, d))
        hidden_base = b * n_max
        index = np.tile(hidden_base + np.arange(3 * length), (b, 1))
        for i in range(b):
            cells = np.flatnonzero(flat_mask[i])
            index[i, cells] = i * n_max + np.arange(cells.size)
        x = dc.gather(dc.concat([dec_in, fill]), index)
        for block in self.decoder:
            x = block(x)
        return dc.reshape(self.decoder_norm(x), (b, length, 3, d))

    def heads_forward(self, latents: Tensor) -> List[Tensor]:
        return [self.heads[name](dc.slice_(latents, (slice(None), slice(None), m)))
                for m, name in enumerate(MODALITIES)]

    def forward(self, batch: SegmentBatch, mask: np.ndarray) -> List[Tensor]:
        """Predictions per modality in (rtg, state, action) order, each (B, L, dim)."""
        tokens = self.tokenize(batch, mask)
        return self.heads_forward(self.decode(self.encode(tokens, mask), mask))

    __call__ = forward

    def reconstruct(self, batch: SegmentBatch, mask: np.ndarray) -> Dict[str, np.ndarray]:
        """Normalized-unit predictions for every cell, keyed by modality name."""
        return {name: pred.data for name, pred in zip(MODALITIES, self.forward(batch, mask))}

    def describe(self) -> str:
        c = self.config
        return 'MtmModel(embed={0}, enc={1}, dec={2}, heads={3}, L={4}, params={5})'.format(
            c.embed_dim, c.n_enc_layers, c.n_dec_layers, c.n_heads, c.segment_length, self.num_parameters())
