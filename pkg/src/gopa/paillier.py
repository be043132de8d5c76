"""Paillier cryptosystem with signed fixed-point encoding.

This is a simulation-grade implementation: arithmetic is not constant
time and the seeded randomness in :func:`keygen` and :func:`encrypt` is
for reproducible experiments, not for protecting real data.
"""

from __future__ import annotations

import hashlib
import math
import random
import secrets
from dataclasses import dataclass
from typing import Optional, Union

import gmpy2

from .errors import CryptoError, DomainError, EncodingRangeError, ParameterError

MILLER_RABIN_ROUNDS = 64
MIN_PRIME_BITS = 128
DEFAULT_SCALE_BITS = 32


def _rng(rng_seed) -> random.Random:
    if isinstance(rng_seed, random.Random):
        return rng_seed
    if rng_seed is None:
        return secrets.SystemRandom()
    return random.Random(rng_seed)


def _random_prime(bits: int, rng: random.Random, max_tries: int) -> int:
    for _ in range(max_tries):
        # top two bits set so that p*q has exactly 2*bits bits
        c = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if gmpy2.is_prime(c, MILLER_RABIN_ROUNDS):
            return c
    raise CryptoError(f"no {bits}-bit prime found after {max_tries} candidates")


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int

    @property
    def nsquare(self) -> int:
        return self.n * self.n

    @property
    def key_id(self) -> str:
        """Short fingerprint used to tell keys apart."""
        return hashlib.sha256(f"{self.n:x}:{self.g:x}".encode()).hexdigest()[:16]

    def to_hex(self) -> str:
        return f"{self.n:x}:{self.g:x}"

    @classmethod
    def from_hex(cls, text: str) -> "PublicKey":
        n, g = text.split(":")
        return cls(int(n, 16), int(g, 16))


@dataclass(frozen=True)
class PrivateKey:
    p: int
    q: int
    lam: int
    mu: int


@dataclass(frozen=True)
class PaillierKeypair:
    public: PublicKey
    private: PrivateKey

    @property
    def n(self) -> int:
        return self.public.n


@dataclass(frozen=True)
class Ciphertext:
    """Element of ``Z*_{N^2}`` tagged with the public key that produced it."""

    value: int
    key: PublicKey

    @property
    def key_id(self) -> str:
        return self.key.key_id

    def to_hex(self) -> str:
        return f"{self.value:x}"


def _L(x: int, n: int) -> int:
    return (x - 1) // n


def keygen(prime_bits: int = MIN_PRIME_BITS, rng_seed=None, simple_generator: bool = True,
           max_tries: Optional[int] = None) -> PaillierKeypair:
    """Generate a keypair with ``N = p q`` of about ``2 * prime_bits`` bits.

    ``simple_generator`` uses ``g = N + 1``; otherwise ``g`` is drawn at
    random from ``Z*_{N^2}`` until ``L(g^lambda mod N^2)`` is invertible.
    """
    if prime_bits < MIN_PRIME_BITS:
        raise ParameterError(f"prime_bits must be at least {MIN_PRIME_BITS}")
    rng = _rng(rng_seed)
    tries = max_tries if max_tries is not None else 100 * prime_bits
    for _ in range(16):
        p = _random_prime(prime_bits, rng, tries)
        q = _random_prime(prime_bits, rng, tries)
        if p != q and math.gcd(p * q, (p - 1) * (q - 1)) == 1:
            break
    else:
        raise CryptoError("could not find a usable prime pair")
    n = p * q
    n2 = n * n
    lam = math.lcm(p - 1, q - 1)
    if simple_generator:
        g = n + 1
    else:
        for _ in range(1000):
            g = rng.randrange(2, n2)
            if math.gcd(g, n) == 1 and math.gcd(_L(pow(g, lam, n2), n), n) == 1:
                break
        else:
            raise CryptoError("no valid generator found")
    u = _L(int(gmpy2.powmod(g, lam, n2)), n)
    try:
        mu = pow(u, -1, n)
    except ValueError as exc:
        raise CryptoError("generator order condition fails") from exc
    return PaillierKeypair(PublicKey(n, g), PrivateKey(p, q, lam, mu))


def random_unit(pub: PublicKey, rng_seed=None) -> int:
    """Uniform element of ``Z*_N``."""
    rng = _rng(rng_seed)
    while True:
        r = rng.randrange(1, pub.n)
        if math.gcd(r, pub.n) == 1:
            return r


def _as_public(key: Union[PublicKey, PaillierKeypair]) -> PublicKey:
    return key.public if isinstance(key, PaillierKeypair) else key


def encrypt(key: Union[PublicKey, PaillierKeypair], m: int, r: Optional[int] = None,
            rng_seed=None) -> Ciphertext:
    """``g^m r^N mod N^2``; a fresh ``r`` is drawn when none is given."""
    pub = _as_public(key)
    n, n2 = pub.n, pub.nsquare
    if not 0 <= m < n:
        raise ParameterError("plaintext must lie in [0, N)")
    if r is None:
        r = random_unit(pub, rng_seed)
    elif not 0 < r < n or math.gcd(r, n) != 1:
        raise ParameterError("randomizer must be a unit of Z_N")
    if pub.g == n + 1:
        gm = (1 + m * n) % n2
    else:
        gm = int(gmpy2.powmod(pub.g, m, n2))
    c = gm * int(gmpy2.powmod(r, n, n2)) % n2
    return Ciphertext(c, pub)


def decrypt(kp: PaillierKeypair, c: Ciphertext) -> int:
    """Recover ``m`` as ``L(c^lambda mod N^2) * mu mod N``."""
    pub = kp.public
    if c.key != pub:
        raise DomainError("ciphertext was produced under a different key")
    n, n2 = pub.n, pub.nsquare
    if not 0 < c.value < n2 or math.gcd(c.value, n) != 1:
        raise CryptoError("ciphertext is not an element of Z*_{N^2}")
    return _L(int(gmpy2.powmod(c.value, kp.private.lam, n2)), n) * kp.private.mu % n


def hom_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Ciphertext of ``m1 + m2 mod N``; the randomizers multiply."""
    if c1.key != c2.key:
        raise DomainError("cannot combine ciphertexts under different keys")
    return Ciphertext(c1.value * c2.value % c1.key.nsquare, c1.key)


def hom_sum(cs, key: Union[PublicKey, PaillierKeypair]) -> Ciphertext:
    """Fold :func:`hom_add` over ``cs``; the empty product encrypts 0 with ``r = 1``."""
    acc = Ciphertext(1, _as_public(key))
    for c in cs:
        acc = hom_add(acc, c)
    return acc


# --- fixed-point encoding -------------------------------------------------

def encode_int(v: int, n: int) -> int:
    """Map a signed integer into ``Z_N`` (negatives wrap to the top half)."""
    if abs(v) > (n - 1) // 2:
        raise EncodingRangeError(f"value {v} does not fit the signed half-range of N")
    return v % n


def decode_int(m: int, n: int) -> int:
    if not 0 <= m < n:
        raise ParameterError("element outside Z_N")
    return m if m <= (n - 1) // 2 else m - n


def encode_fixed(x: float, scale_bits: int, n: int) -> int:
    """``round(x * 2**scale_bits)`` (half to even) as an element of ``Z_N``."""
    return encode_int(int(round(x * 2 ** scale_bits)), n)


def decode_fixed(m: int, scale_bits: int, n: int) -> float:
    return decode_int(m, n) / 2 ** scale_bits
