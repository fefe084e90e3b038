import logging
import math
from dataclasses import dataclass

import galois
import numpy as np

from src.reconcilers.finite_field import FieldSpec
from src.utils.errors import DimensionMismatch, RateTooLow

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ExtractorMatrix:
    """Public r x N_out matrix over GF(p^k); the key is L @ y."""
    field: FieldSpec
    matrix: galois.FieldArray
    seed: int
    rate_bits: float

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def key_bits(self) -> float:
        return self.rows * math.log2(self.field.order)


def key_length(rate_bits: float, n_out: int, field: FieldSpec) -> int:
    """Symbols extracted from n_out blocks at rate_bits per block."""
    return int(math.floor(n_out * rate_bits / math.log2(field.order) + 1e-12))


def build_extractor(rng_seed: int, rate_bits: float, n_out: int, field: FieldSpec) -> ExtractorMatrix:
    if rate_bits <= 0:
        raise RateTooLow(f"Extractor rate must be positive, got {rate_bits}")
    rows = key_length(rate_bits, n_out, field)
    if rows < 1:
        raise RateTooLow(f"Rate {rate_bits:.4g} bits/block over {n_out} blocks yields no GF({field.order}) symbol")
    rng = np.random.default_rng(rng_seed)
    matrix = field.gf(rng.integers(0, field.order, size=(rows, n_out)))
    logger.debug(f"Extractor {rows}x{n_out} over GF({field.order}) from seed {rng_seed}")
    return ExtractorMatrix(field=field, matrix=matrix, seed=rng_seed, rate_bits=rate_bits)


def identity_extractor(rows: int, n_out: int, field: FieldSpec) -> ExtractorMatrix:
    """Projection onto the first `rows` symbols."""
    matrix = field.gf(np.eye(rows, n_out, dtype=np.int64))
    return ExtractorMatrix(field=field, matrix=matrix, seed=-1, rate_bits=rows * math.log2(field.order) / n_out)


def extract(extractor: ExtractorMatrix, y_seq) -> galois.FieldArray:
    """Key symbols L @ y; a 2-D input is treated as one sequence per row."""
    y_seq = extractor.field.elements(y_seq)
    if y_seq.shape[-1] != extractor.cols:
        raise DimensionMismatch(f"Expected sequences of length {extractor.cols}, got shape {y_seq.shape}")
    return y_seq @ extractor.matrix.T
