import json

import numpy as np
import pytest

from ucowod import (
    Box,
    ClassLabel,
    Detection,
    EvalConfig,
    GroundTruthObject,
    RunConfig,
    ToyHead,
    evaluate,
    generate_dataset,
)
from ucowod.cli import main
from ucowod.io import (
    SchemaError,
    config_from_dict,
    load_dataset,
    load_detections,
    load_ground_truth,
    load_head,
    save_dataset,
    save_detections,
    save_ground_truth,
    save_head,
)


def sample_gts():
    return [
        GroundTruthObject(0, ClassLabel.known(0), Box(10.0, 10.0, 4.0, 4.0)),
        GroundTruthObject(0, ClassLabel.known(1), Box(30.0, 10.0, 4.0, 4.0)),
        GroundTruthObject(0, ClassLabel.unknown(3), Box(50.0, 10.0, 4.0, 4.0)),
        GroundTruthObject(1, ClassLabel.unknown(4), Box(10.0, 30.0, 4.0, 4.0)),
    ]


def oracle_detections(gts):
    return [Detection(g.image_id, g.label, g.box, 1.0) for g in gts]


# ---------------------------------------------------------------------------
# file round-trips


def test_ground_truth_round_trip(tmp_path):
    path = tmp_path / "gt.json"
    gts = sample_gts()
    save_ground_truth(path, gts, known_count=3, unknown_slots=8)
    loaded, known_count, unknown_slots = load_ground_truth(path)
    assert (known_count, unknown_slots) == (3, 8)
    assert loaded == gts


def test_detections_round_trip(tmp_path):
    path = tmp_path / "det.jsonl"
    dets = oracle_detections(sample_gts())
    save_detections(path, dets)
    assert load_detections(path, known_count=3, unknown_slots=8) == dets


def test_detection_schema_violations(tmp_path):
    path = tmp_path / "det.jsonl"
    good = {"image_id": 0, "class_id": 1, "bbox": [1.0, 1.0, 2.0, 2.0], "score": 0.5}

    for corrupted in (
        {**good, "class_id": 99},  # outside known + unknown range
        {**good, "score": 1.5},
        {**good, "score": True},
        {**good, "bbox": [1.0, 1.0, 2.0]},
        {**good, "bbox": [1.0, 1.0, -2.0, 2.0]},
        {k: v for k, v in good.items() if k != "score"},
        {**good, "image_id": "zero"},
    ):
        path.write_text(json.dumps(corrupted) + "\n")
        with pytest.raises(SchemaError):
            load_detections(path, known_count=3, unknown_slots=8)

    path.write_text("{not json}\n")
    with pytest.raises(SchemaError, match="line 1"):
        load_detections(path, known_count=3, unknown_slots=8)


def test_ground_truth_schema_violations(tmp_path):
    path = tmp_path / "gt.json"
    path.write_text("[1, 2, 3]\n")
    with pytest.raises(SchemaError):
        load_ground_truth(path)
    path.write_text(json.dumps({"known_count": 3, "annotations": []}) + "\n")
    with pytest.raises(SchemaError, match="unknown_slots"):
        load_ground_truth(path)
    payload = {
        "known_count": 3,
        "unknown_slots": 8,
        "annotations": [{"image_id": 0, "class_id": 0, "bbox": [0, 0, 0, 2]}],
    }
    path.write_text(json.dumps(payload) + "\n")
    with pytest.raises(SchemaError, match=r"annotations\[0\]"):
        load_ground_truth(path)


def test_missing_files_raise_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_ground_truth(tmp_path / "absent.json")
    with pytest.raises(FileNotFoundError):
        load_detections(tmp_path / "absent.jsonl", 3, 8)


def test_dataset_round_trip(tmp_path):
    config = RunConfig(seed=5, train_scenes=3, test_scenes=2)
    dataset = generate_dataset(config)
    path = tmp_path / "dataset.json"
    save_dataset(path, dataset)
    loaded = load_dataset(path)
    assert loaded.config == config
    for a, b in zip(loaded.train + loaded.test, dataset.train + dataset.test):
        assert a.image_id == b.image_id
        assert a.proposals == b.proposals
        assert a.gts == b.gts
        assert np.allclose(a.features, b.features, atol=0)


def test_head_round_trip(tmp_path):
    head = ToyHead.create(feature_dim=4, hidden_dim=6, n_logits=7, seed=3, weight_decay=1e-3)
    path = tmp_path / "model.json"
    save_head(path, head)
    loaded = load_head(path)
    assert np.array_equal(loaded.w_hidden, head.w_hidden)
    assert loaded.weight_decay == head.weight_decay


def test_config_from_dict_overrides_and_rejects_unknown_keys():
    config = config_from_dict({"seed": 9, "ulp": {"delta": 0.7}, "weights": {"alpha_sim": 0.0}})
    assert config.seed == 9
    assert config.ulp.delta == 0.7
    assert config.weights.alpha_sim == 0.0
    assert config.epochs == RunConfig().epochs  # untouched default
    with pytest.raises(SchemaError, match="momentum"):
        config_from_dict({"momentum": 0.9})


# ---------------------------------------------------------------------------
# command line


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--help"])
    assert excinfo.value.code == 0
    assert "simulate" in capsys.readouterr().out


def test_eval_missing_file_exits_one(tmp_path, capsys):
    code = run_cli("eval", "--gt", tmp_path / "no.json", "--det", tmp_path / "no.jsonl",
                   "--out", tmp_path / "report.json")
    assert code == 1
    assert "missing file" in capsys.readouterr().err


def test_eval_schema_violation_exits_two(tmp_path, capsys):
    gt_path = tmp_path / "gt.json"
    save_ground_truth(gt_path, sample_gts(), 3, 8)
    det_path = tmp_path / "det.jsonl"
    det_path.write_text('{"image_id": 0, "class_id": 99, "bbox": [1,1,2,2], "score": 0.5}\n')
    code = run_cli("eval", "--gt", gt_path, "--det", det_path, "--out", tmp_path / "r.json")
    assert code == 2
    assert "schema violation" in capsys.readouterr().err


def test_eval_oracle_detections_report(tmp_path, capsys):
    gts = sample_gts()
    gt_path, det_path, out_path = tmp_path / "gt.json", tmp_path / "det.jsonl", tmp_path / "r.json"
    save_ground_truth(gt_path, gts, 3, 8)
    save_detections(det_path, oracle_detections(gts))
    assert run_cli("eval", "--gt", gt_path, "--det", det_path, "--out", out_path) == 0
    report = json.loads(out_path.read_text())
    assert report["uc_map"] == 1.0
    assert report["map_known"] == 1.0
    assert report["wi"] == 0.0
    assert report["a_ose"] == 0
    assert report["uc_recall"] == 1.0
    assert report["config_echo"]["known_count"] == 3


def test_eval_report_matches_library_evaluate(tmp_path):
    g = np.random.default_rng(17)
    gts, dets = [], []
    for image_id in range(3):
        for _ in range(4):
            cls = int(g.integers(0, 5))
            box = Box(g.uniform(5, 60), g.uniform(5, 60), g.uniform(3, 9), g.uniform(3, 9))
            label = ClassLabel.known(cls) if cls < 3 else ClassLabel.unknown(cls)
            gts.append(GroundTruthObject(image_id, label, box))
            if g.random() < 0.8:
                jitter = Box(box.cx + g.normal(0, 1), box.cy + g.normal(0, 1), box.w, box.h)
                dets.append(Detection(image_id, label, jitter, float(g.uniform(0.1, 1.0))))
    gt_path, det_path, out_path = tmp_path / "gt.json", tmp_path / "det.jsonl", tmp_path / "r.json"
    save_ground_truth(gt_path, gts, 3, 8)
    save_detections(det_path, dets)
    assert run_cli("eval", "--gt", gt_path, "--det", det_path, "--out", out_path) == 0

    report = json.loads(out_path.read_text())
    loaded_gts, known_count, unknown_slots = load_ground_truth(gt_path)
    loaded_dets = load_detections(det_path, known_count, unknown_slots)
    direct = evaluate(loaded_gts, loaded_dets, EvalConfig())
    assert report["map_known"] == round(direct.map_known, 6)
    assert report["wi"] == round(direct.wi, 6)
    assert report["a_ose"] == direct.a_ose
    assert report["uc_map"] == round(direct.uc_map, 6)
    assert report["uc_recall"] == round(direct.uc_recall, 6)
    assert report["permutation"] == {str(k): v for k, v in direct.permutation.items()}


def test_simulate_writes_dataset_and_ground_truth(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"train_scenes": 3, "test_scenes": 2}))
    out_dir = tmp_path / "run"
    assert run_cli("simulate", "--out-dir", out_dir, "--seed", 4, "--config", config_path) == 0
    dataset = load_dataset(out_dir / "dataset.json")
    assert len(dataset.train) == 3 and len(dataset.test) == 2
    assert dataset.config.seed == 4
    gts, known_count, _ = load_ground_truth(out_dir / "gt.json")
    assert known_count == 3
    # gt.json rounds coordinates to 6 decimals; dataset.json keeps full precision
    full = dataset.test_ground_truth()
    assert len(gts) == len(full)
    for rounded_gt, full_gt in zip(gts, full):
        assert (rounded_gt.image_id, rounded_gt.label) == (full_gt.image_id, full_gt.label)
        for attr in ("cx", "cy", "w", "h"):
            assert getattr(rounded_gt.box, attr) == pytest.approx(
                getattr(full_gt.box, attr), abs=1e-6
            )


def test_invalid_config_key_via_cli_exits_two(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"not_a_field": 1}))
    assert run_cli("simulate", "--out-dir", tmp_path / "run", "--config", config_path) == 2
    assert "not_a_field" in capsys.readouterr().err
