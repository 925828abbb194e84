import json

import numpy as np
import pytest

from zsalign.data import (CodebookEntry, DataValidationError, EmbeddingSet, SemanticCodebook,
                          SplitSpec, SyntheticWorldConfig, directory_checksums, gen_synthetic_world,
                          load_codebook, load_embedding_set, make_tri_splits, save_world)


def _codebook(n=3, c_e=4, n_d=2, motion=False, seed=0):
    rng = np.random.default_rng(seed)
    return SemanticCodebook({c: CodebookEntry(f"c{c}", rng.standard_normal((n_d, c_e)),
                                              rng.standard_normal(c_e) if motion else None)
                             for c in range(n)})


def test_embedding_set_normalizes_rows(rng):
    data = EmbeddingSet([f"s{i}" for i in range(10)], [0] * 10, rng.standard_normal((10, 256)))
    assert data.visual_dim == 256
    np.testing.assert_allclose(np.linalg.norm(data.all_vectors(), axis=1), 1.0, atol=1e-6)


def test_embedding_set_nan_names_sample():
    v = np.ones((3, 4))
    v[1, 2] = np.nan
    with pytest.raises(DataValidationError, match="b"):
        EmbeddingSet(["a", "b", "c"], [0, 0, 1], v)


def test_embedding_set_rejects_duplicates_and_ragged():
    with pytest.raises(DataValidationError):
        EmbeddingSet(["a", "a"], [0, 1], np.ones((2, 3)))
    with pytest.raises(DataValidationError):
        EmbeddingSet(["a", "b"], [0], np.ones((2, 3)))


def test_embedding_set_select_and_subset(rng):
    data = EmbeddingSet(["a", "b", "c", "d"], [0, 1, 2, 1], rng.standard_normal((4, 3)))
    U, y = data.select([1])
    assert U.shape == (2, 3) and list(y) == [1, 1]
    sub = data.subset([0, 2])
    assert sub.sample_ids == ["a", "c"]
    assert sub.class_set() == {0, 2}


def test_codebook_minimal_and_stack():
    cb = SemanticCodebook({0: CodebookEntry("x", np.ones((1, 3))),
                           1: CodebookEntry("y", np.ones((3, 3)), np.ones(3))})
    desc, n_valid, motion = cb.stack([0, 1])
    assert desc.shape == (2, 3, 3)
    assert list(n_valid) == [1, 3]
    np.testing.assert_array_equal(desc[0, 1:], 0.0)
    np.testing.assert_array_equal(motion[0], 0.0)
    np.testing.assert_allclose(np.linalg.norm(motion[1]), 1.0, atol=1e-6)


def test_codebook_large_loads():
    rng = np.random.default_rng(0)
    cb = SemanticCodebook({c: CodebookEntry(f"a{c}", rng.standard_normal((100, 768)))
                           for c in range(60)})
    assert len(cb) == 60 and cb.semantic_dim == 768


@pytest.mark.parametrize("entry", [
    CodebookEntry("m", np.ones((2, 4)), np.ones(3)),
    CodebookEntry("", np.ones((2, 4))),
    CodebookEntry("n", np.full((2, 4), np.inf)),
])
def test_codebook_validation(entry):
    with pytest.raises(DataValidationError):
        SemanticCodebook({0: entry}, 4)


def test_splits_reference_sizes():
    s = make_tri_splits(range(60), 5, seed=0)
    assert len(s) == 3
    for i in range(3):
        f = s.fold(i)
        assert (len(f.seen), len(f.unseen)) == (55, 5)
    unseen = [set(s.fold(i).unseen) for i in range(3)]
    assert not (unseen[0] & unseen[1]) and not (unseen[1] & unseen[2])
    s51 = make_tri_splits(range(51), 5, seed=1)
    assert all((len(s51.fold(i).seen), len(s51.fold(i).unseen)) == (46, 5) for i in range(3))


def test_splits_deterministic_and_roundtrip():
    a, b = make_tri_splits(range(20), 4, 9), make_tri_splits(range(20), 4, 9)
    assert a == b
    assert SplitSpec.from_json(json.loads(json.dumps(a.to_json()))) == a


def test_splits_validation():
    with pytest.raises(DataValidationError):
        make_tri_splits(range(10), 10, 0)
    with pytest.raises(DataValidationError):
        SplitSpec(((frozenset({0, 1}), frozenset({1})),))
    with pytest.raises(DataValidationError):
        make_tri_splits(range(5), 2, 0).validate_against(range(3))


def test_synthetic_separable_oracle():
    cfg = SyntheticWorldConfig(n_classes=10, visual_noise=0.0, description_spread=0.0, seed=4)
    _, _, oracle = gen_synthetic_world(cfg)
    assert oracle.accuracy == 1.0


def test_synthetic_deterministic():
    cfg = SyntheticWorldConfig(seed=5, with_motion=True, distractor_fraction=0.3)
    d1, c1, _ = gen_synthetic_world(cfg)
    d2, c2, _ = gen_synthetic_world(cfg)
    np.testing.assert_array_equal(d1.all_vectors(), d2.all_vectors())
    for cid in c1.class_ids:
        np.testing.assert_array_equal(c1.entry(cid).descriptions, c2.entry(cid).descriptions)
        np.testing.assert_array_equal(c1.entry(cid).motion, c2.entry(cid).motion)


def test_synthetic_ambiguity_confuses_oracle():
    cfg = SyntheticWorldConfig(ambiguity_pairs=2, ambiguity_offset=0.01, visual_noise=0.1, seed=2)
    _, _, oracle = gen_synthetic_world(cfg)
    assert oracle.paired_classes == [0, 1, 2, 3]
    assert oracle.paired_accuracy < 1.0


def test_synthetic_config_validation():
    with pytest.raises(DataValidationError):
        gen_synthetic_world(SyntheticWorldConfig(n_classes=10, n_unseen=10))


@pytest.mark.parametrize("dtype", ["f32le", "csv"])
def test_world_roundtrip_is_exact(tmp_path, small_world, dtype):
    _, data, codebook, _ = small_world
    save_world(tmp_path, data, codebook, dtype=dtype)
    cb2 = load_codebook(tmp_path)
    d2 = load_embedding_set(tmp_path, cb2)
    np.testing.assert_array_equal(d2.all_vectors(), data.all_vectors())
    assert d2.sample_ids == data.sample_ids
    for cid in codebook.class_ids:
        np.testing.assert_array_equal(cb2.entry(cid).descriptions, codebook.entry(cid).descriptions)
        np.testing.assert_array_equal(cb2.entry(cid).motion, codebook.entry(cid).motion)


def test_world_save_is_byte_stable(tmp_path, small_world):
    _, data, codebook, _ = small_world
    save_world(tmp_path / "a", data, codebook)
    save_world(tmp_path / "b", data, codebook)
    assert directory_checksums(tmp_path / "a") == directory_checksums(tmp_path / "b")


def test_loader_errors(tmp_path, small_world):
    _, data, codebook, _ = small_world
    save_world(tmp_path, data, codebook)
    # ragged description blob
    blob = tmp_path / "desc_0.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DataValidationError, match="ragged"):
        load_codebook(tmp_path)
    save_world(tmp_path, data, codebook)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["classes"][0]["name"] = ""
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataValidationError, match="name"):
        load_codebook(tmp_path)
    save_world(tmp_path, data, codebook)
    labels = (tmp_path / "labels.csv").read_text().splitlines()
    labels[1] = labels[1].split(",")[0] + ",99"
    (tmp_path / "labels.csv").write_text("\n".join(labels) + "\n")
    with pytest.raises(DataValidationError, match="unknown class_id 99"):
        load_embedding_set(tmp_path)
    with pytest.raises(DataValidationError, match="manifest not found"):
        load_codebook(tmp_path / "missing")


def test_loader_nan_embedding(tmp_path, small_world):
    _, data, codebook, _ = small_world
    save_world(tmp_path, data, codebook)
    raw = np.fromfile(tmp_path / "embeddings.bin", dtype="<f4")
    raw[data.visual_dim * 3] = np.nan
    raw.tofile(tmp_path / "embeddings.bin")
    with pytest.raises(DataValidationError, match=data.sample_ids[3]):
        load_embedding_set(tmp_path)


def test_synthetic_modes_and_distractors():
    base = dict(n_classes=6, n_unseen=2, N_d=9, samples_per_class=30, seed=1)
    d1, c1, _ = gen_synthetic_world(SyntheticWorldConfig(modes_per_class=3, **base))
    d2, c2, _ = gen_synthetic_world(SyntheticWorldConfig(modes_per_class=3, **base))
    np.testing.assert_array_equal(d1.all_vectors(), d2.all_vectors())
    # one mode reproduces the single-prototype world exactly
    a, _, _ = gen_synthetic_world(SyntheticWorldConfig(modes_per_class=1, **base))
    b, _, _ = gen_synthetic_world(SyntheticWorldConfig(**base))
    np.testing.assert_array_equal(a.all_vectors(), b.all_vectors())
    _, shared, _ = gen_synthetic_world(SyntheticWorldConfig(
        distractor_fraction=0.5, distractor_kind="shared", description_spread=0.0, **base))
    # shared distractors are the same vector in every class
    rows = [{tuple(np.round(r, 5)) for r in shared.entry(c).descriptions} for c in shared.class_ids]
    assert set.intersection(*rows)
    with pytest.raises(DataValidationError):
        gen_synthetic_world(SyntheticWorldConfig(distractor_kind="weird", **base))
    with pytest.raises(DataValidationError):
        gen_synthetic_world(SyntheticWorldConfig(modes_per_class=0, **base))
