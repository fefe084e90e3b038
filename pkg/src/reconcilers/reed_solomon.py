"""Reed-Solomon syndromes and bounded-distance syndrome decoding.

The code of length N and dimension K over GF(q) is the null space of
H[i, j] = alpha^(i*j), i = 1..N-K, j = 0..N-1, with alpha primitive; N < q - 1
gives a shortened code. A terminal publishes H*y, and a party holding a noisy
copy y_hat recovers y by decoding the error pattern from H*y_hat - H*y.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import galois
import numpy as np

from src.reconcilers.finite_field import FieldSpec
from src.utils.errors import DecodeFailure, DimensionMismatch, FieldMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RSCode:
    field: FieldSpec
    length: int
    dimension: int

    def __post_init__(self):
        if not 1 <= self.dimension <= self.length <= self.field.order - 1:
            raise ValueError(f"Need 1 <= K <= N <= q - 1, got K={self.dimension}, N={self.length}, "
                             f"q={self.field.order}")

    @property
    def redundancy(self) -> int:
        return self.length - self.dimension

    @property
    def radius(self) -> int:
        return self.redundancy // 2

    @cached_property
    def locators(self) -> galois.FieldArray:
        gf = self.field.gf
        return gf.primitive_element ** np.arange(self.length)

    @cached_property
    def parity_check(self) -> galois.FieldArray:
        powers = np.arange(1, self.redundancy + 1)[:, None]
        return self.locators[None, :] ** powers

    @cached_property
    def generator(self) -> galois.FieldArray:
        return self.parity_check.null_space()

    def encode(self, message) -> galois.FieldArray:
        return self.field.elements(message) @ self.generator


def _check_sequence(code: RSCode, seq) -> galois.FieldArray:
    seq = code.field.elements(seq)
    if seq.shape[-1] != code.length:
        raise DimensionMismatch(f"Expected sequences of length {code.length}, got shape {seq.shape}")
    return seq


def coset_decompose(code: RSCode, y_seq) -> galois.FieldArray:
    """Syndrome H*y; equal for every member of a coset."""
    y_seq = _check_sequence(code, y_seq)
    return y_seq @ code.parity_check.T


def berlekamp_massey(syndromes: galois.FieldArray) -> galois.Poly:
    """Shortest connection polynomial C(x) = 1 + c_1 x + ... generating the sequence."""
    gf = type(syndromes)
    c = galois.Poly([1], field=gf)
    b = galois.Poly([1], field=gf)
    length, shift, last = 0, 1, gf(1)
    for step in range(len(syndromes)):
        coeffs = c.coeffs[::-1]
        d = gf(int(syndromes[step]))
        for i in range(1, min(length, len(coeffs) - 1) + 1):
            d = d + coeffs[i] * syndromes[step - i]
        if d == 0:
            shift += 1
            continue
        previous = c
        c = c - (d / last) * b * galois.Poly.Degrees([shift], coeffs=[1], field=gf)
        if 2 * length <= step:
            length = step + 1 - length
            b, last, shift = previous, d, 1
        else:
            shift += 1
    return c


def error_pattern(code: RSCode, syndrome) -> galois.FieldArray:
    """Error vector of weight <= radius with the given syndrome, or DecodeFailure."""
    gf = code.field.gf
    syndrome = code.field.elements(syndrome)
    error = gf.Zeros(code.length)
    if not np.any(syndrome):
        return error
    locator = berlekamp_massey(syndrome)
    errors = locator.degree
    if errors > code.radius:
        raise DecodeFailure(f"Locator degree {errors} exceeds the correction radius {code.radius}")
    inverse = code.locators ** -1
    positions = np.flatnonzero(locator(inverse) == 0)
    if len(positions) != errors:
        raise DecodeFailure(f"Locator has {len(positions)} roots among the code positions, expected {errors}")
    # evaluator Omega(x) = S(x) Lambda(x) mod x^(N-K), S(x) = sum_i S_i x^(i-1)
    s_poly = galois.Poly(syndrome[::-1], field=gf)
    evaluator = (s_poly * locator) % galois.Poly.Degrees([code.redundancy], coeffs=[1], field=gf)
    slope = locator.derivative()
    x_inv = inverse[positions]
    denom = slope(x_inv)
    if np.any(denom == 0):
        raise DecodeFailure("Repeated locator root")
    error[positions] = -evaluator(x_inv) / denom
    if not np.array_equal(error @ code.parity_check.T, syndrome):
        raise DecodeFailure("Decoded pattern does not reproduce the syndrome")
    return error


def sw_correct(code: RSCode, y_hat_seq, syndrome) -> galois.FieldArray:
    y_hat_seq = _check_sequence(code, y_hat_seq)
    syndrome = code.field.elements(syndrome)
    if syndrome.shape[-1] != code.redundancy:
        raise FieldMismatch(f"Syndrome of length {syndrome.shape[-1]} does not match redundancy {code.redundancy}")
    return y_hat_seq - error_pattern(code, coset_decompose(code, y_hat_seq) - syndrome)


def syndrome_bits(code: RSCode) -> float:
    return code.redundancy * float(np.log2(code.field.order))


def decode_batch(code: RSCode, y_hat_rows, syndromes) -> Tuple[galois.FieldArray, np.ndarray]:
    """Row-wise sw_correct; failed rows keep y_hat and are flagged False."""
    y_hat_rows = _check_sequence(code, y_hat_rows)
    out = y_hat_rows.copy()
    ok = np.ones(len(y_hat_rows), dtype=bool)
    for i in range(len(y_hat_rows)):
        try:
            out[i] = sw_correct(code, y_hat_rows[i], syndromes[i])
        except DecodeFailure as e:
            logger.debug(f"Row {i}: {e}")
            ok[i] = False
    return out, ok
