from fractions import Fraction

import numpy as np
import pytest

from gopa import graph as gr
from gopa import paillier as pl
from gopa import protocol as pr
from gopa import verification as vf
from gopa.errors import EncodingRangeError, ParameterError, ProtocolError
from gopa.protocol import PrivateValues


@pytest.fixture(scope="module")
def setup():
    g = gr.generate_k_out(12, 3, 5)
    keys = vf.generate_keys(g.n, 128, 1)
    return g, keys


def _publish(g, keys, script=None, seed=0):
    x = PrivateValues.gaussian(g.n, 1.0, seed)
    _, ledger = pr.randomization_phase(g, x, 1.0, seed, mode="fixed")
    board, wallets = vf.publish_phase(g, x, ledger, script, rng_seed=seed, keys=keys)
    return x, ledger, board, wallets


def test_board_append_only_and_text_round_trip(setup):
    g, keys = setup
    _, _, board, _ = _publish(g, keys)
    # pubkey, X, Delta, Xtilde plus one slot per incident edge
    assert len(board) == 4 * g.n + 2 * g.num_edges
    with pytest.raises(ProtocolError):
        board.publish(0, "X", 1)
    back = vf.PublicationBoard.from_text(board.to_text())
    assert back.to_text() == board.to_text()
    assert back.public_key(3) == keys[3].public


def test_published_ciphertexts_decrypt_to_wallet(setup):
    g, keys = setup
    x, ledger, board, wallets = _publish(g, keys)
    for u in range(g.n):
        kp = keys[u]
        dec = lambda slot: pl.decode_int(pl.decrypt(kp, board.ciphertext(u, slot)), kp.n)
        assert dec("X") == int(x.quantised(32)[u])
        for v in g.neighbors(u).tolist():
            assert dec(f"delta:{v}") == ledger.get(u, v)
        assert dec("Xtilde") == wallets[u].noisy
        # randomizer of the noise sum is the product of the per-edge ones
        prod = 1
        for v in g.neighbors(u).tolist():
            prod = prod * wallets[u].r_delta[v] % kp.n
        assert wallets[u].r_sum == prod
        assert wallets[u].r_noisy == wallets[u].r_x * prod % kp.n


def test_honest_run_passes_all_checks(setup):
    g, keys = setup
    _, _, board, wallets = _publish(g, keys)
    assert len(vf.coherence_check(board, g)) == 0
    assert len(vf.reveal_and_cross_check(board, g, wallets, 0.0, 3)) == 0


def test_wrong_noise_sum_caught_by_coherence(setup):
    g = gr.assign_roles(setup[0], 0.0, malicious=[4])
    _, _, board, _ = _publish(g, setup[1], vf.CheatScript(wrong_delta={4: 0.5}))
    acc = vf.coherence_check(board, g)
    assert acc.users == {4}
    assert acc.accusations[0].check == vf.CHECK_COHERENCE


def test_asymmetric_cheat_flagged_when_revealed(setup):
    g, keys = setup
    u = 2
    v = int(g.neighbors(u)[0])
    g = gr.assign_roles(g, 0.0, malicious=[u])
    script = vf.CheatScript(asymmetric=[(u, v, 1.0)])
    _, _, board, wallets = _publish(g, keys, script)
    assert len(vf.coherence_check(board, g)) == 0
    # beta = 0 reveals every edge: the partner's ciphertext no longer encrypts -delta
    acc = vf.reveal_and_cross_check(board, g, wallets, 0.0, 0)
    assert u in acc.users
    assert all(a.check == vf.CHECK_CROSS for a in acc.accusations)
    # revealing the agreed value instead breaks the cheater's own commitment
    script2 = vf.CheatScript(asymmetric=[(u, v, 1.0)], reveal="agreed")
    _, _, board2, wallets2 = _publish(g, keys, script2)
    acc2 = vf.reveal_and_cross_check(board2, g, wallets2, 0.0, 0)
    assert u in acc2.users and acc2.users <= {u, v}
    own = [a for a in acc2.accusations if a.user == u and a.evidence[0] == board2.offset(u, f"delta:{v}")]
    assert own, "cheater's own reveal must be flagged"
    # only v's reveal of the same edge pulls v in, never u's own reveal
    assert len([a for a in acc2.accusations if a.user == v]) == 1


def test_refusal_flagged(setup):
    g = gr.assign_roles(setup[0], 0.0, malicious=[7])
    _, _, board, wallets = _publish(g, setup[1], vf.CheatScript(refuse={7}))
    acc = vf.reveal_and_cross_check(board, g, wallets, 0.0, 0)
    assert 7 in acc.users
    assert any(a.check == vf.CHECK_REFUSAL and a.user == 7 for a in acc.accusations)


def test_script_validation(setup):
    g, _ = setup
    with pytest.raises(ParameterError):
        vf.CheatScript(wrong_delta={0: 1.0}).validate(g)  # 0 is honest
    with pytest.raises(ParameterError):
        vf.CheatScript(reveal="lie").validate(g)


def test_reveal_subsets_size_and_determinism(setup):
    g, _ = setup
    s = vf.reveal_subsets(g, 0.5, 42)
    assert s == vf.reveal_subsets(g, 0.5, 42)
    for u, sub in s.items():
        d = int(g.degrees[u])
        assert len(sub) == vf.reveal_subset_size(0.5, d) == -(-d // 2)
        assert set(sub) <= set(g.neighbors(u).tolist())
    assert vf.reveal_subset_size(0.7, 10) == 3
    assert vf.reveal_subset_size(1.0, 10) == 0


def test_detection_probability_values():
    assert vf.detection_probability(0.5, 1) == 0.75
    assert vf.detection_probability(0.25, 2) == pytest.approx(1 - 0.25 ** 4)
    assert vf.detection_probability(0.9, 0) == 0.0
    with pytest.raises(ParameterError):
        vf.detection_probability(1.5, 1)


def test_end_to_end_exact_average():
    res = vf.run_verified_protocol(vf.VerifiedConfig(n=12, k=3, seed=4))
    assert len(res.cheaters) == 0
    assert res.average_fraction == res.exact_fraction
    q = res.values.quantised(32)
    assert res.exact_fraction == Fraction(int(q.sum()), 12 * 2 ** 32)
    assert res.privacy is not None and set(res.privacy.rho) == set(range(12))


def test_flagged_cheater_removed_and_average_exact(setup):
    g, keys = setup
    cheater = int(np.argmax(g.degrees))
    gm = gr.assign_roles(g, 0.0, malicious=[cheater])
    script = vf.single_cheater_script(gm, cheater, 2)
    res = vf.run_verified_protocol(vf.VerifiedConfig(beta=0.0, script=script, graph=gm, keys=keys, seed=1,
                                                     compute_privacy=False))
    assert cheater in res.cheaters.users
    assert cheater not in res.survivors.tolist()
    assert res.average_fraction == res.exact_fraction


def test_undetected_cheat_biases_average(setup):
    g, keys = setup
    gm = gr.assign_roles(g, 0.0, malicious=[0])
    script = vf.single_cheater_script(gm, 0, 1, amount=0.5)
    res = vf.run_verified_protocol(vf.VerifiedConfig(beta=1.0, script=script, graph=gm, keys=keys, seed=2,
                                                     compute_privacy=False))
    assert len(res.cheaters) == 0
    assert res.average_fraction - res.exact_fraction == Fraction(1, 2 * g.n)


def test_revealed_edges_leave_privacy_graph(setup):
    g, keys = setup
    res = vf.run_verified_protocol(vf.VerifiedConfig(beta=0.0, graph=g, keys=keys, seed=3))
    # every edge revealed: no hidden noise remains, so nothing is preserved
    assert all(r == 0.0 for r in res.privacy.rho.values())


def test_capacity_check():
    with pytest.raises(EncodingRangeError):
        vf.check_capacity(2 ** 40, 32, 1e3, 6.0, 10)
    vf.check_capacity(2 ** 256, 32, 1e3, 6.0, 10)


def test_detection_experiment_small(setup):
    g, keys = setup
    cheater = int(np.argmax(g.degrees))
    gm = gr.assign_roles(g, 0.0, malicious=[cheater])
    st = vf.detection_experiment(gm, vf.single_cheater_script(gm, cheater, 1), 0.5, 60, seed=0, keys=keys)
    assert st.C == 1 and st.bound == 0.75
    assert st.rate >= st.bound - st.margin
    honest = vf.detection_experiment(g, vf.CheatScript(), 0.5, 20, seed=0, keys=keys)
    assert honest.detected == 0 and honest.honest_accused == 0
