import json
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvqa.data import (
    QUADRANTS,
    SIZE,
    SPECIALS,
    Scene,
    build_vocab,
    corpus_vocab,
    derive_qa,
    generate_world,
    make_samples,
    mentions_nodule,
    parse_report,
    quadrant_means,
    read_dataset,
    render_images,
    render_report,
    split_samples,
    write_dataset,
)
from qvqa.data.reports import LOCATION_Q, PRESENCE_Q, SIZE_Q, ReportParseError, template_corpus
from qvqa.data.vocab import UnknownTokenError, Vocabulary, split_words
from qvqa.data.world import NOISE_STD, _anatomy

seeds = st.integers(0, 2**31 - 1)


def scene(**kw):
    base = dict(id="x", organ="breast", nodule_present=True, quadrant="upper-inner", size_units=9,
                echo_texture="smooth", thickness_units=8, secondary_abnormal=False)
    base.update(kw)
    return Scene(**base)


# world -----------------------------------------------------------------------


def test_world_is_deterministic():
    assert generate_world(7, 4) == generate_world(7, 4)
    assert generate_world(7, 4) != generate_world(8, 4)


def test_world_prefix_is_stable():
    assert generate_world(7, 10)[:4] == generate_world(7, 4)


def test_world_class_balance():
    positives = sum(s.nodule_present for s in generate_world(0, 1000))
    assert 450 <= positives <= 550


def test_world_single_scene():
    (only,) = generate_world(3, 1)
    assert only.id == "00000"
    assert (only.quadrant is not None) == only.nodule_present


def test_world_rejects_empty():
    with pytest.raises(ValueError):
        generate_world(0, 0)


def test_world_positives_cover_quadrants_and_sizes():
    pos = [s for s in generate_world(1, 2000) if s.nodule_present]
    assert {s.quadrant for s in pos} == set(QUADRANTS)
    counts = np.array([sum(s.quadrant == q for s in pos) for q in QUADRANTS])
    assert counts.min() > 0.2 * len(pos)
    sizes = [s.size_units for s in pos]
    assert min(sizes) == 2 and max(sizes) == 20


def test_scene_invariants():
    with pytest.raises(ValueError):
        scene(quadrant=None)
    with pytest.raises(ValueError):
        scene(nodule_present=False)
    with pytest.raises(ValueError):
        scene(size_units=21)
    with pytest.raises(ValueError):
        scene(organ="liver")


def test_ids_unique():
    ids = [s.id for s in generate_world(2, 300)]
    assert len(set(ids)) == 300


# rendering -------------------------------------------------------------------


@given(seeds, st.sampled_from(QUADRANTS), st.integers(2, 20), st.sampled_from(["breast", "thyroid"]),
       st.sampled_from(["smooth", "coarse"]), st.booleans())
def test_nodule_quadrant_is_darkest(seed, quadrant, size, organ, texture, secondary):
    sc = scene(quadrant=quadrant, size_units=size, organ=organ, echo_texture=texture, secondary_abnormal=secondary)
    for view in render_images(sc, seed):
        means = quadrant_means(view)
        assert all(means[quadrant] < means[q] for q in QUADRANTS if q != quadrant)


def test_absent_nodule_quadrants_within_three_sigma():
    negatives = [s for s in generate_world(11, 200) if not s.nodule_present]
    for sc in negatives:
        for view in render_images(sc, 11):
            g = view.mean()
            assert all(abs(m - g) <= 3 * NOISE_STD for m in quadrant_means(view).values())


@pytest.mark.parametrize("organ", ["breast", "thyroid"])
@pytest.mark.parametrize("texture", ["smooth", "coarse"])
@pytest.mark.parametrize("secondary", [False, True])
def test_background_is_quadrant_symmetric(organ, texture, secondary):
    base = _anatomy(scene(nodule_present=False, quadrant=None, size_units=None, organ=organ,
                          echo_texture=texture, secondary_abnormal=secondary))
    means = list(quadrant_means(base).values())
    assert max(means) - min(means) < 1e-12


def test_render_deterministic_and_views_differ():
    sc = scene()
    a, b = render_images(sc, 5), render_images(sc, 5)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 64, 64) and a.dtype == np.float32
    assert not np.array_equal(a[0], a[1])


# reports and QA --------------------------------------------------------------


def test_report_mentions_nodule_and_quadrant():
    r = render_report(scene(quadrant="lower-outer"))
    assert "hypoechoic nodule" in r and "lower-outer" in r


def test_report_without_nodule():
    r = render_report(scene(nodule_present=False, quadrant=None, size_units=None))
    assert "no obvious nodule" in r and not mentions_nodule(r)


def test_reports_differ_only_in_numeral():
    a, b = render_report(scene(size_units=4)), render_report(scene(size_units=17))
    wa, wb = a.split(), b.split()
    diffs = [(x, y) for x, y in zip(wa, wb) if x != y]
    assert len(wa) == len(wb) and diffs == [("4", "17")]


def test_positive_scene_qa_inventory():
    sc = scene()
    qa = derive_qa(sc, render_report(sc))
    grans = [p.granularity for p in qa]
    assert len(qa) >= 5
    assert grans.count("coarse") == 1 and grans.count("medium") == 2 and grans.count("fine") == 3
    fine = {p.question: p.answer for p in qa if p.granularity == "fine"}
    assert fine == {PRESENCE_Q: "yes", LOCATION_Q: "in the upper-inner region", SIZE_Q: "[size]"}


def test_negative_scene_fine_set():
    sc = scene(nodule_present=False, quadrant=None, size_units=None)
    fine = [(p.question, p.answer) for p in derive_qa(sc, render_report(sc)) if p.granularity == "fine"]
    assert fine == [(PRESENCE_Q, "no")]


def test_coarse_pair_is_masked_report():
    sc = scene(organ="thyroid")
    report = render_report(sc)
    coarse = [p for p in derive_qa(sc, report) if p.granularity == "coarse"][0]
    assert coarse.question == "Describe the thyroid ultrasound image."
    assert coarse.answer == re.sub(r"\d+", "[size]", report)


@given(seeds)
def test_dataset_level_invariants(seed):
    for s in make_samples(seed, 6):
        grans = [p.granularity for p in s.qa]
        assert s.images.shape == (2, 64, 64)
        assert grans.count("coarse") == 1
        assert grans.count("medium") == len(parse_report(s.report).regions) == 2
        assert grans.count("fine") == (3 if s.scene.nodule_present else 1)
        assert s.scene.nodule_present == ("hypoechoic nodule" in s.report)
        for p in s.qa:
            assert not any(ch.isdigit() for ch in p.answer)


def test_parse_rejects_foreign_sentence():
    bad = render_report(scene()) + " the liver is enlarged."
    with pytest.raises(ReportParseError, match="liver"):
        parse_report(bad)


def test_derive_rejects_mismatched_report():
    with pytest.raises(ReportParseError):
        derive_qa(scene(nodule_present=False, quadrant=None, size_units=None), render_report(scene()))


# vocabulary ------------------------------------------------------------------


def test_specials_fixed_ids():
    v = build_vocab(["a b."])
    assert v.itos[:5] == list(SPECIALS)
    assert v.stoi["[size]"] == SIZE == 4


def test_vocab_round_trip_on_corpus():
    samples = make_samples(4, 40)
    v = corpus_vocab(samples)
    for s in samples:
        assert v.detokenize(v.tokenize(s.report)) == s.report
        for p in s.qa:
            assert v.detokenize(v.tokenize(p.answer)) == p.answer
            assert v.detokenize(v.tokenize(p.question)) == p.question


def test_vocab_is_deterministic_and_bijective():
    corpus = list(template_corpus())
    a, b = build_vocab(corpus), build_vocab(list(reversed(corpus)))
    assert a == b
    assert len(set(a.stoi.values())) == len(a) and all(a.itos[i] == t for t, i in a.stoi.items())


def test_template_vocab_is_closed():
    v = build_vocab(template_corpus())
    for s in make_samples(9, 30):
        v.tokenize(s.report)
    assert 50 < len(v) < 400


def test_unseen_word_rejected():
    v = build_vocab(["a b."])
    with pytest.raises(UnknownTokenError):
        v.tokenize("a c.")


def test_vocab_json_round_trip(tmp_path):
    v = build_vocab(template_corpus())
    v.save(tmp_path / "vocab.json")
    assert Vocabulary.load(tmp_path / "vocab.json") == v


def test_split_words_punctuation():
    assert split_words("Is there a nodule?") == ["Is", "there", "a", "nodule", "?"]
    assert split_words("upper-outer [size] units.") == ["upper-outer", "[size]", "units", "."]


# on-disk dataset -------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    samples = make_samples(2, 5)
    vocab = write_dataset(tmp_path, samples)
    back, vocab2 = read_dataset(tmp_path)
    assert vocab2 == vocab
    for a, b in zip(samples, back):
        assert a.scene == b.scene and a.report == b.report and a.qa == b.qa
        np.testing.assert_array_equal(a.images, b.images)


def test_dataset_record_schema(tmp_path):
    write_dataset(tmp_path, make_samples(2, 3))
    lines = (tmp_path / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[0])
    assert {"id", "organ", "report", "labels", "qa", "images"} <= set(rec)
    assert {"nodule_present", "quadrant", "size_units"} <= set(rec["labels"])
    assert rec["images"] == [f"{rec['id']}_a.qvt", f"{rec['id']}_b.qvt"]
    assert set(rec["qa"][0]) == {"granularity", "question", "answer"}
    assert len(list(tmp_path.glob("*.qvt"))) == 6


def test_missing_dataset_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)


def test_split_ratio_and_determinism():
    samples = make_samples(0, 50)
    tr, va, te = split_samples(samples, 3)
    assert (len(tr), len(va), len(te)) == (35, 5, 10)
    assert [s.id for s in tr] == [s.id for s in split_samples(samples, 3)[0]]
    assert {s.id for s in tr} | {s.id for s in va} | {s.id for s in te} == {s.id for s in samples}
    with pytest.raises(ValueError):
        split_samples([], 0)
