import math
import random

import gmpy2
import pytest
from hypothesis import given, settings, strategies as st

from gopa import paillier as pl
from gopa.errors import DomainError, EncodingRangeError, ParameterError


@pytest.fixture(scope="module")
def kp():
    return pl.keygen(128, rng_seed=11)


def test_keygen_structure(kp):
    p, q = kp.private.p, kp.private.q
    assert p != q and gmpy2.is_prime(p) and gmpy2.is_prime(q)
    assert p.bit_length() == q.bit_length() == 128
    assert kp.n.bit_length() == 256
    assert kp.public.g == kp.n + 1
    assert kp.private.lam == math.lcm(p - 1, q - 1)


def test_keygen_deterministic_per_seed(kp):
    assert pl.keygen(128, rng_seed=11) == kp
    assert pl.keygen(128, rng_seed=12).n != kp.n


def test_keygen_rejects_short_primes():
    with pytest.raises(ParameterError):
        pl.keygen(64, rng_seed=0)


def test_textbook_small_example():
    # p = 7, q = 11: N = 77, g = 78, lambda = 30
    pub = pl.PublicKey(77, 78)
    lam = 30
    mu = pow((pow(78, lam, 77 * 77) - 1) // 77, -1, 77)
    kp = pl.PaillierKeypair(pub, pl.PrivateKey(7, 11, lam, mu))
    c = pl.encrypt(pub, 42, r=23)
    assert c.value == (1 + 42 * 77) * pow(23, 77, 77 * 77) % (77 * 77)
    assert pl.decrypt(kp, c) == 42


def test_random_generator_variant():
    kp = pl.keygen(128, rng_seed=3, simple_generator=False)
    assert kp.public.g != kp.n + 1
    for m in (0, 1, 12345, kp.n - 1):
        assert pl.decrypt(kp, pl.encrypt(kp, m, rng_seed=m)) == m


@given(m1=st.integers(0, 2 ** 255), m2=st.integers(0, 2 ** 255), seed=st.integers(0, 2 ** 32))
@settings(max_examples=100, deadline=None)
def test_homomorphism(kp, m1, m2, seed):
    n = kp.n
    m1, m2 = m1 % n, m2 % n
    rng = random.Random(seed)
    r1, r2 = pl.random_unit(kp.public, rng), pl.random_unit(kp.public, rng)
    c = pl.hom_add(pl.encrypt(kp, m1, r1), pl.encrypt(kp, m2, r2))
    assert pl.decrypt(kp, c) == (m1 + m2) % n
    # randomizers multiply under the homomorphism
    assert c == pl.encrypt(kp, (m1 + m2) % n, r1 * r2 % n)


def test_hom_sum_empty_and_many(kp):
    assert pl.decrypt(kp, pl.hom_sum([], kp)) == 0
    cs = [pl.encrypt(kp, pl.encode_int(v, kp.n), rng_seed=v + 100) for v in range(-5, 6)]
    assert pl.decode_int(pl.decrypt(kp, pl.hom_sum(cs, kp)), kp.n) == 0


def test_key_mismatch(kp):
    other = pl.keygen(128, rng_seed=99)
    a, b = pl.encrypt(kp, 1, rng_seed=0), pl.encrypt(other, 1, rng_seed=0)
    with pytest.raises(DomainError):
        pl.hom_add(a, b)
    with pytest.raises(DomainError):
        pl.decrypt(kp, b)


def test_plaintext_and_randomizer_domain(kp):
    with pytest.raises(ParameterError):
        pl.encrypt(kp, kp.n)
    with pytest.raises(ParameterError):
        pl.encrypt(kp, -1)
    with pytest.raises(ParameterError):
        pl.encrypt(kp, 1, r=kp.private.p)


@given(v=st.integers(-(2 ** 200), 2 ** 200))
@settings(max_examples=100, deadline=None)
def test_signed_encoding_round_trip(kp, v):
    assert pl.decode_int(pl.encode_int(v, kp.n), kp.n) == v


def test_signed_encoding_edges(kp):
    half = (kp.n - 1) // 2
    assert pl.decode_int(pl.encode_int(half, kp.n), kp.n) == half
    assert pl.decode_int(pl.encode_int(-half, kp.n), kp.n) == -half
    with pytest.raises(EncodingRangeError):
        pl.encode_int(half + 1, kp.n)


def test_fixed_point_rounding(kp):
    n = kp.n
    assert pl.decode_fixed(pl.encode_fixed(1.5, 0, n), 0, n) == 2.0
    assert pl.decode_fixed(pl.encode_fixed(2.5, 0, n), 0, n) == 2.0
    assert pl.decode_fixed(pl.encode_fixed(-0.75, 2, n), 2, n) == -0.75


def test_public_key_hex_round_trip(kp):
    assert pl.PublicKey.from_hex(kp.public.to_hex()) == kp.public
    assert len(kp.public.key_id) == 16
