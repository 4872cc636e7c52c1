import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcppd import grammar
from dcppd.evalproto import rule_extract
from dcppd.questions import KINDS, LOBE_SIDE, LOBES, LUNG_KINDS, QS_ORDER, SIDES, default_sets, question_set
from dcppd.synthdata import (
    ConfigError,
    DatasetConfig,
    FindingSpec,
    GroundTruth,
    InvariantError,
    apply_windows,
    derive_seed,
    generate_phantom,
    load_dataset,
    make_dataset,
    render_report,
    write_dataset,
)


def test_question_set_sizes():
    full = default_sets("full")
    assert [full[q].arity for q in QS_ORDER] == [18, 8, 15]
    assert default_sets()["QS1"].arity == 4


def test_window_stack_clamps_in_order():
    raw = np.array([[[0.0, 0.25, 0.6, 1.0]]])
    vol = apply_windows(raw, [(0.0, 0.5), (0.5, 1.0)])
    assert vol.data.shape == (2, 1, 1, 4)
    np.testing.assert_allclose(vol.data[0, 0, 0], [0.0, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(vol.data[1, 0, 0], [0.0, 0.0, 0.2, 1.0])
    with pytest.raises(ConfigError):
        apply_windows(raw, [(0.5, 0.5)])


def test_phantom_is_seed_deterministic():
    a_vol, a_gt = generate_phantom(123)
    b_vol, b_gt = generate_phantom(123)
    assert np.array_equal(a_vol.data, b_vol.data)
    assert a_gt.labels() == b_gt.labels()
    assert a_vol.data.shape == (3, 32, 32, 32)
    assert a_vol.data.dtype == np.float32


def test_item_seeds_are_order_independent():
    ds = make_dataset(6, 5)
    assert [it.seed for it in ds.items] == [derive_seed(5, i) for i in range(6)]
    assert make_dataset(3, 5).items[2].seed == ds.items[2].seed


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_labels_respect_hierarchy(seed):
    _, gt = generate_phantom(seed)
    gt.check_hierarchy()


def test_inconsistent_finding_rejected():
    with pytest.raises(InvariantError):
        FindingSpec("nodule", "left", "RUL")
    with pytest.raises(InvariantError):
        FindingSpec("pleural_effusion", "left", "LLL")


def test_effusion_never_sets_lobe_answers():
    cfg = DatasetConfig(forced_findings=(("pleural_effusion", "right", None),))
    _, gt = generate_phantom(0, cfg)
    assert gt.qs3.values.sum() == 0
    assert gt.qs2.values.sum() == 1


def test_grid_too_small_is_a_config_error():
    with pytest.raises(ConfigError):
        generate_phantom(0, DatasetConfig(grid=(8, 8, 8)))


def test_planted_finding_raises_local_intensity():
    cfg = DatasetConfig(forced_findings=(("nodule", "left", "LLL"),), noise_std=0.0)
    vol, gt = generate_phantom(3, cfg)
    f = gt.findings[0]
    x, y, z = f.center
    assert vol.data[2, x, y, z] > vol.data[2, 2, 2, 2]


def _labels_for(findings):
    return GroundTruth.from_findings(findings).labels()


def _all_finding_combos(max_findings=2):
    """Every label combination with at most two findings (one per kind)."""
    options = {}
    for kind in KINDS:
        locs = [(s, None) for s in SIDES]
        if kind in LUNG_KINDS:
            locs += [(LOBE_SIDE[lb], lb) for lb in LOBES]
        options[kind] = locs
    yield []
    for r in range(1, max_findings + 1):
        for kinds in itertools.combinations(KINDS, r):
            for locs in itertools.product(*(options[k] for k in kinds)):
                yield [FindingSpec(k, s, lb) for k, (s, lb) in zip(kinds, locs)]


@pytest.mark.parametrize("structured", [True, False])
def test_round_trip_exhaustive_small(structured):
    n = 0
    for findings in _all_finding_combos():
        gt = GroundTruth.from_findings(findings)
        for style_seed in (0, 1):
            report = render_report(gt, style_seed, structured=structured)
            assert rule_extract(report.flat_text).labels == gt.labels()
            n += 1
    assert n > 300


def test_structured_report_sections():
    gt = GroundTruth.from_findings([FindingSpec("nodule", "left", "LLL")])
    rep = render_report(gt, 0)
    assert list(rep.sections) == ["Lungs", "Pleura"]
    assert rep.flat_text.startswith("Lungs:")
    un = render_report(gt, 0, structured=False)
    assert list(un.sections) == [grammar.UNSTRUCTURED_SECTION]


def test_dataset_write_load_round_trip(tmp_path):
    ds = make_dataset(4, 2, out_dir=tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert [it.id for it in back.items] == [it.id for it in ds.items]
    for i in range(4):
        assert back[i].gt.labels() == ds[i].gt.labels()
        assert back[i].report.flat_text == ds[i].report.flat_text
        assert np.array_equal(back.volume(i).data, ds.volume(i).data)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["n"] == 4
    assert (tmp_path / "d" / "class_distribution.csv").read_text().startswith("Set,Question,Pos,Neg")


def test_dataset_without_volume_files_regenerates(tmp_path):
    ds = make_dataset(2, 9)
    write_dataset(ds, tmp_path / "d", include_volumes=False)
    assert not any((tmp_path / "d" / "volumes").iterdir())
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.volume(1).data, ds.volume(1).data)


def test_load_missing_dataset_names_command(tmp_path):
    with pytest.raises(FileNotFoundError, match="gen-data"):
        load_dataset(tmp_path / "nope")


def test_negative_prevalence_rejected():
    with pytest.raises(ConfigError):
        make_dataset(1, 0, DatasetConfig(prevalence={"nodule": -0.1}))


def test_full_qs1_subset_keeps_unplantable_questions_zero():
    cfg = DatasetConfig(qs1_subset="full")
    _, gt = generate_phantom(4, cfg)
    assert gt.qs1.qs == question_set("QS1", "full")
    assert gt.qs1.values.sum() <= len(KINDS)
