import numpy as np
import pytest

from conftest import TOY_OLA
from slottok.bsq import dequantize_rows, quantize_rows
from slottok.editor import (SwapPlan, cyclic_pairs, edit_and_decode, make_plan,
                            read_edit_manifest, select_least, select_random, select_slots,
                            swap_chunks, swap_codes, write_edit_manifest)
from slottok.errors import InputError
from slottok.ola import ChunkCodes, OlaConfig, tokenize_sequence


def test_select_slots_partial_sum_walk():
    g = np.array([0.5, 0.3, 0.2])
    assert select_slots(g, 0.5).slots == [0]
    assert select_slots(g, 0.7).slots == [0, 1]
    assert select_slots(g, 0.81).slots == [0, 1, 2]


def test_select_slots_gamma_one_selects_minimal_full_mass():
    g = np.array([0.5, 0.5, 0.0, 0.0])
    assert select_slots(g, 1.0).slots == [0, 1]
    uniform = np.full(8, 1 / 8)
    assert select_slots(uniform, 1.0).slots == list(range(8))


def test_select_slots_tie_break_lower_index():
    g = np.array([0.25, 0.25, 0.25, 0.25])
    assert select_slots(g, 0.5).slots == [0, 1]


def test_select_slots_validates_inputs():
    g = np.array([0.5, 0.5])
    with pytest.raises(InputError):
        select_slots(g, 0.0)
    with pytest.raises(InputError):
        select_slots(g, 1.5)
    with pytest.raises(InputError):
        select_slots(np.array([0.5, 0.2]), 0.5)  # not normalized


def test_select_slots_monotone_in_gamma():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L = int(rng.integers(2, 30))
        g = rng.random(L) + 1e-12
        g = g / g.sum()
        g1, g2 = sorted(rng.uniform(0.01, 1.0, size=2))
        s1 = set(select_slots(g, g1).slots)
        s2 = set(select_slots(g, g2).slots)
        assert s1 <= s2


def test_select_random_deterministic_and_uniform_budget():
    a = select_random(10, 4, seed=7)
    b = select_random(10, 4, seed=7)
    assert a.slots == b.slots and a.m == 4
    assert select_random(10, 10, seed=1).m == 10
    with pytest.raises(InputError):
        select_random(10, 0, seed=1)
    with pytest.raises(InputError):
        select_random(10, 11, seed=1)


def test_select_least_examples():
    g = np.array([0.5, 0.3, 0.2])
    assert select_least(g, 1).slots == [2]
    assert select_least(g, 3).slots == [2, 1, 0]
    tied = np.array([0.25, 0.25, 0.25, 0.25])
    assert select_least(tied, 2).slots == [0, 1]


def test_make_plan_matched_budget():
    g = np.array([4.0, 3.0, 2.0, 1.0])
    base = make_plan(g, 0.7, "importance")
    rand = make_plan(g, 0.7, "random", seed=3)
    least = make_plan(g, 0.7, "least")
    assert base.m == rand.m == least.m == 2
    assert base.slots == [0, 1]
    assert least.slots == [3, 2]


def test_swap_codes_single_row_splice():
    src, k_src = quantize_rows(np.random.default_rng(1).standard_normal((3, 4)))
    tgt, k_tgt = quantize_rows(np.random.default_rng(2).standard_normal((3, 4)))
    out, k = swap_codes(src, tgt, SwapPlan("importance", [1], gamma=0.5))
    assert np.array_equal(out[0], src[0]) and np.array_equal(out[2], src[2])
    assert np.array_equal(out[1], tgt[1])
    assert k[0] == k_src[0] and k[1] == k_tgt[1] and k[2] == k_src[2]


def test_swap_codes_total_replacement_and_self_identity():
    rng = np.random.default_rng(3)
    src, _ = quantize_rows(rng.standard_normal((5, 3)))
    tgt, k_tgt = quantize_rows(rng.standard_normal((5, 3)))
    out, k = swap_codes(src, tgt, SwapPlan("importance", list(range(5)), gamma=1.0))
    assert np.array_equal(out, tgt) and np.array_equal(k, k_tgt)
    out2, _ = swap_codes(src, src, SwapPlan("random", [0, 2], seed=1))
    assert np.array_equal(out2, src)


def test_swap_codes_splice_locality_is_bitwise():
    # float32 codes from disk must survive the splice bit-for-bit
    src = dequantize_rows(np.arange(4, dtype=np.uint64), 3).astype(np.float32)
    tgt = dequantize_rows(np.arange(4, 8, dtype=np.uint64), 3).astype(np.float32)
    out, _ = swap_codes(src, tgt, SwapPlan("least", [2]))
    assert out[0].tobytes() == src[0].tobytes()
    assert out[1].tobytes() == src[1].tobytes()
    assert out[3].tobytes() == src[3].tobytes()


def test_swap_codes_idempotent():
    rng = np.random.default_rng(4)
    src, _ = quantize_rows(rng.standard_normal((6, 4)))
    tgt, _ = quantize_rows(rng.standard_normal((6, 4)))
    plan = SwapPlan("importance", [1, 4], gamma=0.3)
    once, k1 = swap_codes(src, tgt, plan)
    twice, k2 = swap_codes(once, tgt, plan)
    assert np.array_equal(once, twice) and np.array_equal(k1, k2)


def test_swap_codes_shape_mismatch():
    with pytest.raises(InputError):
        swap_codes(np.ones((3, 4)), np.ones((4, 4)), SwapPlan("importance", [0]))
    with pytest.raises(InputError):
        swap_codes(np.ones((3, 4)), np.ones((3, 4)), SwapPlan("importance", [3]))


def test_swap_chunks_keeps_unmatched_source_tail():
    rng = np.random.default_rng(5)
    mk = lambda: ChunkCodes(*quantize_rows(rng.standard_normal((4, 3))), start=0, end=10)
    src = [mk(), mk(), mk()]
    tgt = [mk()]
    out = swap_chunks(src, tgt, SwapPlan("importance", [0], gamma=0.2))
    assert np.array_equal(out[0].codes[0], tgt[0].codes[0])
    assert out[1] is src[1] and out[2] is src[2]


def test_plan_validation():
    with pytest.raises(InputError):
        SwapPlan("importance", [])
    with pytest.raises(InputError):
        SwapPlan("importance", [1, 1])
    with pytest.raises(InputError):
        SwapPlan("bogus", [1])


def test_edit_self_swap_is_resynthesis(clean_model, clean_corpus, toy_ola):
    seqs = clean_corpus["seqs"]
    seq = seqs[sorted(seqs)[0]]
    g = np.array([5.0, 2, 1, 1, 0.5, 0.25, 0.1, 0.05])
    edited, plan = edit_and_decode(seq, seq, clean_model, g, 0.6, ola_cfg=toy_ola)
    chunks = tokenize_sequence(seq, clean_model, toy_ola)
    plain = clean_model.decompress(chunks[0].codes, seq.T)
    assert np.array_equal(edited.frames, plain)


def test_edit_near_one_hot_profile_swaps_one_slot(clean_model, clean_corpus, toy_ola):
    seqs = clean_corpus["seqs"]
    ids = sorted(seqs)
    g = np.zeros(clean_model.cfg.L)
    g[3] = 1.0
    _, plan = edit_and_decode(seqs[ids[0]], seqs[ids[1]], clean_model, g, 0.05, ola_cfg=toy_ola)
    assert plan.slots == [3]


def test_cyclic_pairs_deterministic_and_class_skipping():
    manifest = {f"u{i}": {"labels": {"speaker": f"s{i % 2}"}} for i in range(6)}
    ids = sorted(manifest)
    pairs = cyclic_pairs(ids, ids, manifest, factor="speaker", shift=1)
    assert pairs == cyclic_pairs(ids, ids, manifest, factor="speaker", shift=1)
    for sid, tid in pairs:
        assert manifest[sid]["labels"]["speaker"] != manifest[tid]["labels"]["speaker"]
    with pytest.raises(InputError):
        cyclic_pairs(["u0"], ["u0"], manifest, factor=None, shift=1)


def test_edit_across_different_lengths(clean_model, clean_corpus, toy_ola):
    # long source, short target: the plan applies to the aligned first
    # window, trailing source windows keep their codes, and the decoded
    # output has the source's length
    from slottok.corpus import FeatureSequence
    rng = np.random.default_rng(8)
    long_src = FeatureSequence(rng.standard_normal((48, 12)).astype(np.float32), utterance_id="long")
    short_tgt = clean_corpus["seqs"][sorted(clean_corpus["seqs"])[0]]
    g = np.ones(clean_model.cfg.L)
    edited, plan = edit_and_decode(long_src, short_tgt, clean_model, g, 0.5, ola_cfg=toy_ola)
    assert edited.frames.shape == (48, 12)
    src_chunks = tokenize_sequence(long_src, clean_model, toy_ola)
    tgt_chunks = tokenize_sequence(short_tgt, clean_model, toy_ola)
    assert len(src_chunks) == 3 and len(tgt_chunks) == 1
    edited_chunks = swap_chunks(src_chunks, tgt_chunks, plan)
    assert np.array_equal(edited_chunks[0].codes[plan.slots], tgt_chunks[0].codes[plan.slots])
    assert np.array_equal(edited_chunks[1].codes, src_chunks[1].codes)
    assert np.array_equal(edited_chunks[2].codes, src_chunks[2].codes)


def test_noise_slot_swap_moves_toward_clean(noisy_model, noisy_corpus, toy_ola):
    # swapping noise-ranked slots from clean targets shifts the probe's
    # noise class toward clean more often than the matched random control
    from slottok.importance import partition_from_labels, profile
    from slottok.ola import resynthesize
    from slottok.probe import fit_probe, transfer_rate

    manifest, seqs = noisy_corpus["manifest"], noisy_corpus["seqs"]
    ids = sorted(seqs)
    labels = {e["id"]: str(e["labels"]["noise"]) for e in manifest}
    codes = {uid: [c.codes for c in tokenize_sequence(seqs[uid], noisy_model, toy_ola)] for uid in ids}
    prof = profile(codes, partition_from_labels(manifest, "noise"))

    resyn = [resynthesize(seqs[i], noisy_model, toy_ola).frames for i in ids]
    probe = fit_probe(resyn, [labels[i] for i in ids], "noise")

    noisy_ids = [i for i in ids if labels[i] != "clean"]
    clean_ids = [i for i in ids if labels[i] == "clean"]
    by_id = {e["id"]: e for e in manifest}
    pairs = []
    for shift in range(3):
        pairs += cyclic_pairs(noisy_ids, clean_ids, by_id, factor="noise", shift=shift)

    rates = {}
    for policy in ("importance", "random"):
        edits = []
        for n, (sid, tid) in enumerate(pairs):
            edited, plan = edit_and_decode(seqs[sid], seqs[tid], noisy_model, prof.g, 0.4,
                                           policy=policy, seed=500 + n, ola_cfg=toy_ola)
            edits.append(edited.frames)
        rates[policy] = transfer_rate(probe, edits, ["clean"] * len(edits))
    assert rates["importance"] > rates["random"]


def test_edit_manifest_roundtrip(tmp_path):
    entries = [{"source_id": "a", "target_id": "b", "policy": "importance",
                "gamma": 0.5, "m": 2, "slots": [0, 3], "output_path": "edited/a__to__b.latf"}]
    write_edit_manifest(entries, tmp_path / "edits.json")
    assert read_edit_manifest(tmp_path / "edits.json") == entries
    (tmp_path / "bad.json").write_text('[{"source_id": "a"}]')
    from slottok.errors import FormatError
    with pytest.raises(FormatError):
        read_edit_manifest(tmp_path / "bad.json")
