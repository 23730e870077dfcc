import json
from collections import Counter

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from corpus import make_toy_corpus
from palettemcm.dataset import (
    SplitSpec,
    assign_splits,
    attach_conditions,
    build_manifest,
    distinct_colors,
    load_manifest,
    pca_2d,
    project_colors_2d,
    read_captions,
    tsne_2d,
    write_manifest,
    write_projection_csv,
    write_projection_svg,
)
from palettemcm.errors import (
    DuplicateId,
    EmptyCorpus,
    InvalidConfig,
    MissingEmbedding,
    ParseError,
    ShapeMismatch,
    TooManyPoints,
)
from palettemcm.mcm import read_pteb, stub_condition_encoder, write_pteb


@pytest.fixture
def toy(tmp_path):
    img_dir, captions = make_toy_corpus(tmp_path)
    report = build_manifest(img_dir, captions, relative_to=tmp_path)
    return tmp_path, report.records


def test_split_spec():
    assert SplitSpec().counts(10) == (8, 1, 1)
    assert SplitSpec.parse("0.5,0.25,0.25").counts(8) == (4, 2, 2)
    with pytest.raises(InvalidConfig):
        SplitSpec.parse("0.5,0.5,0.5")
    with pytest.raises(InvalidConfig):
        SplitSpec.parse("a,b")


def test_build_manifest_counts_and_fields(toy):
    root, records = toy
    assert len(records) == 10
    assert Counter(r.split for r in records) == {"train": 8, "val": 1, "test": 1}
    r = records[0]
    assert r.id == "img00" and r.image_path == "images/img00.png"
    assert r.caption == "red sunset 0" and len(r.palette) == 5 and r.cond_path is None


def test_split_assignment_partition_and_determinism():
    ids = [f"x{i}" for i in range(37)]
    a = assign_splits(ids, SplitSpec(), 3)
    assert a == assign_splits(list(reversed(ids)), SplitSpec(), 3)
    assert set(a) == set(ids)
    n = Counter(a.values())
    assert abs(n["train"] - 0.8 * 37) <= 1 and abs(n["val"] - 0.1 * 37) <= 1 and abs(n["test"] - 0.1 * 37) <= 1
    assert a != assign_splits(ids, SplitSpec(), 4)


def test_undecodable_image_skipped(tmp_path):
    img_dir, captions = make_toy_corpus(tmp_path, n=3)
    (img_dir / "broken.png").write_bytes(b"garbage")
    report = build_manifest(img_dir, captions)
    assert report.skipped == ["broken.png"] and len(report.records) == 3


def test_empty_corpus(tmp_path):
    (tmp_path / "imgs").mkdir()
    (tmp_path / "c.tsv").write_text("", encoding="utf-8")
    with pytest.raises(EmptyCorpus):
        build_manifest(tmp_path / "imgs", tmp_path / "c.tsv")


def test_captions_parse_error(tmp_path):
    (tmp_path / "c.tsv").write_text("a.png\tfine\nno tab here\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        read_captions(tmp_path / "c.tsv")
    assert err.value.line == 2


def test_manifest_round_trip(toy):
    root, records = toy
    write_manifest(records, root / "m.jsonl")
    assert load_manifest(root / "m.jsonl") == records
    lines = (root / "m.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert set(json.loads(lines[0])) == {"id", "image_path", "caption", "palette", "split", "cond_path"}


def test_manifest_parse_error_names_line(toy):
    root, records = toy
    write_manifest(records, root / "m.jsonl")
    lines = (root / "m.jsonl").read_text().splitlines()
    lines[2] = "{not json"
    (root / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_manifest(root / "bad.jsonl")
    assert err.value.line == 3 and "line 3" in str(err.value)


def test_manifest_duplicate_id(toy):
    root, records = toy
    write_manifest(records, root / "m.jsonl")
    lines = (root / "m.jsonl").read_text().splitlines()
    (root / "dup.jsonl").write_text("\n".join(lines + [lines[0]]) + "\n")
    with pytest.raises(DuplicateId):
        load_manifest(root / "dup.jsonl")


def test_attach_stub_conditions(toy):
    root, records = toy
    out = attach_conditions(records, "stub", 4, 32, out_dir=root / "cond", relative_to=root)
    assert all(r.cond_path == f"cond/{r.id}.pteb" for r in out)
    assert [(r.palette, r.caption) for r in out] == [(r.palette, r.caption) for r in records]
    m = read_pteb(root / out[0].cond_path)
    assert m.shape == (4, 32)
    assert np.array_equal(m, stub_condition_encoder(records[0].caption, 4, 32))
    first = {r.id: (root / r.cond_path).read_bytes() for r in out}
    again = attach_conditions(records, "stub", 4, 32, out_dir=root / "cond", relative_to=root)
    assert {r.id: (root / r.cond_path).read_bytes() for r in again} == first


def test_attach_external_dir(toy):
    root, records = toy
    ext = root / "ext"
    ext.mkdir()
    for r in records[1:]:
        write_pteb(ext / f"{r.id}.pteb", np.ones((2, 8)))
    with pytest.raises(MissingEmbedding) as err:
        attach_conditions(records, "external-dir", 2, 8, cond_dir=ext)
    assert err.value.missing_ids == [records[0].id]
    write_pteb(ext / f"{records[0].id}.pteb", np.ones((2, 8)))
    out = attach_conditions(records, "external-dir", 2, 8, cond_dir=ext, relative_to=root)
    assert out[0].cond_path == f"ext/{records[0].id}.pteb"
    with pytest.raises(ShapeMismatch):
        attach_conditions(records, "external-dir", 2, 9, cond_dir=ext)


# --- projections -------------------------------------------------------------

def test_pca_coplanar_points_keep_all_variance():
    rng = np.random.default_rng(0)
    uv = rng.normal(0, 10, (200, 2))
    basis = Rotation.random(random_state=1).as_matrix()[:2]
    pts = uv @ basis + np.array([50.0, 3, -7])
    proj = pca_2d(pts)
    centred = pts - pts.mean(0)
    assert abs(np.sum(centred**2) - np.sum(proj**2)) / len(pts) < 1e-9


def test_pca_rotation_invariant_up_to_sign():
    rng = np.random.default_rng(2)
    pts = rng.normal(0, 1, (100, 3)) * [20, 8, 2]
    rot = Rotation.random(random_state=3).as_matrix()
    a = pca_2d(pts)
    b = pca_2d(pts @ rot.T + 5)
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-8)


def test_tsne_deterministic_and_separates_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, (40, 3)) + [30, 0, 0]
    b = rng.normal(0, 1, (40, 3)) + [60, 10, 10]
    pts = np.vstack([a, b])
    y1 = tsne_2d(pts, seed=5)
    assert np.array_equal(y1, tsne_2d(pts, seed=5))
    ca, cb = y1[:40].mean(0), y1[40:].mean(0)
    intra = np.mean(np.concatenate([np.linalg.norm(y1[:40] - ca, axis=1), np.linalg.norm(y1[40:] - cb, axis=1)]))
    assert np.linalg.norm(ca - cb) / intra > 3


def test_tsne_cap():
    with pytest.raises(TooManyPoints):
        tsne_2d(np.zeros((20_001, 3)))


def test_project_and_write(toy):
    root, records = toy
    labs, counts = distinct_colors(records)
    assert counts.sum() == 50
    for method in ("pca", "tsne"):
        pts = project_colors_2d(records, method, seed=0)
        assert len(pts) == len(labs)
        write_projection_csv(pts, root / f"{method}.csv")
        write_projection_svg(pts, root / f"{method}.svg")
        assert len((root / f"{method}.csv").read_text().splitlines()) == len(labs) + 1
        assert (root / f"{method}.svg").read_text().count("<circle") == len(labs)
    with pytest.raises(EmptyCorpus):
        project_colors_2d([], "pca")
