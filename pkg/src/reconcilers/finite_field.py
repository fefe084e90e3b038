import logging
from dataclasses import dataclass
from functools import lru_cache

import galois
import numpy as np

from src.utils.errors import FieldMismatch

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def _galois_field(order: int):
    return galois.GF(order)


@dataclass(frozen=True)
class FieldSpec:
    """GF(p^k); element a_0 + a_1 x + ... is stored as the integer sum a_i p^i."""
    p: int
    k: int

    @property
    def order(self) -> int:
        return self.p ** self.k

    @property
    def gf(self):
        return _galois_field(self.order)

    @property
    def modulus(self) -> galois.Poly:
        return self.gf.irreducible_poly

    def elements(self, values) -> galois.FieldArray:
        if isinstance(values, galois.FieldArray):
            if type(values).order != self.order:
                raise FieldMismatch(f"Values live in GF({type(values).order}), expected GF({self.order})")
            return values
        values = np.asarray(values, dtype=np.int64)
        if values.size and (values.min() < 0 or values.max() >= self.order):
            raise FieldMismatch(f"Values outside GF({self.order})")
        return self.gf(values)

    def pack(self, digits) -> galois.FieldArray:
        """Last axis of F_p digits (length k) -> field elements."""
        digits = np.asarray(digits, dtype=np.int64) % self.p
        if digits.shape[-1] != self.k:
            raise FieldMismatch(f"Expected {self.k} digits per symbol, got {digits.shape[-1]}")
        weights = self.p ** np.arange(self.k, dtype=np.int64)
        return self.gf(digits @ weights)

    def unpack(self, symbols) -> np.ndarray:
        ints = self.elements(symbols).view(np.ndarray).astype(np.int64)
        return (ints[..., None] // (self.p ** np.arange(self.k, dtype=np.int64))) % self.p


def field_spec(p: int, k: int) -> FieldSpec:
    if k < 1:
        raise ValueError(f"Extension degree must be positive, got {k}")
    spec = FieldSpec(p=p, k=k)
    if spec.gf.characteristic != p:
        raise ValueError(f"{p} is not prime")
    if not spec.modulus.is_irreducible():
        raise FieldMismatch(f"Modulus {spec.modulus} of GF({p}^{k}) is reducible")
    logger.debug(f"GF({p}^{k}) modulus {spec.modulus}")
    return spec
