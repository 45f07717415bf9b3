import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from pcda.datasets import CloudArrays
from pcda.evalreport import (
    REFERENCE_TABLE,
    TABLE_COLUMNS,
    ConfusionMatrix,
    compare_scenarios,
    evaluate,
    export_clouds,
    normalize_rows,
    read_ply,
    reference_reports,
    save_report,
    write_ply,
)
from pcda.nets import ModelBundle, NetConfig


class LabelReader(nn.Module):
    """Classifier fixture: the label is stored in the first coordinate of every cloud."""

    def __init__(self, k, mapping=None):
        super().__init__()
        self.k = k
        self.mapping = mapping

    def forward(self, x):
        label = x[:, 0, 0].round().long()
        if self.mapping is not None:
            label = torch.as_tensor(self.mapping)[label]
        return torch.nn.functional.one_hot(label, self.k).float()


class Constant(nn.Module):
    def __init__(self, k, logits):
        super().__init__()
        self.k = k
        self.logits = torch.tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def bundle_with(classifier, k):
    cfg = NetConfig(cloud_size=4, n_classes=k)
    return ModelBundle(cfg, {"classifier": classifier}, {"classifier": False})


def labelled(labels, pts=4):
    labels = np.asarray(labels, dtype=np.int64)
    points = np.zeros((labels.size, pts, 3), np.float32)
    points[:, 0, 0] = labels
    return CloudArrays(points, labels)


class TestConfusionMatrix:
    def test_perfect(self):
        data = labelled([0, 1, 2, 3, 0, 1, 2, 3])
        acc, cm = evaluate(bundle_with(LabelReader(4), 4), data)
        assert acc == 1.0
        np.testing.assert_array_equal(cm.counts, 2 * np.eye(4, dtype=int))
        np.testing.assert_array_equal(cm.row_normalized, np.eye(4))

    def test_constant_class(self):
        data = labelled(np.repeat(np.arange(4), 5))
        acc, cm = evaluate(bundle_with(Constant(4, [0, 0, 1, 0]), 4), data)
        assert acc == 0.25
        assert cm.counts[:, 2].tolist() == [5, 5, 5, 5]

    def test_ties_go_to_lowest_index(self):
        acc, cm = evaluate(bundle_with(Constant(3, [0.5, 0.5, 0.5]), 3), labelled([0, 1, 2]))
        assert cm.counts[:, 0].tolist() == [1, 1, 1]

    def test_random_recount(self):
        rng = np.random.default_rng(8)
        labels = rng.integers(0, 3, 40)
        mapping = [2, 0, 1]
        acc, cm = evaluate(bundle_with(LabelReader(3, mapping), 3), labelled(labels))
        preds = [mapping[l] for l in labels]
        hits = 0
        for l, p in zip(labels, preds):
            if l == p:
                hits += 1
        assert acc == hits / 40
        for i in range(3):
            for j in range(3):
                assert cm.counts[i, j] == sum(1 for l, p in zip(labels, preds) if l == i and p == j)

    def test_accuracy_is_trace_over_sum(self):
        cm = ConfusionMatrix(np.array([[3, 1], [2, 4]]))
        assert cm.accuracy() == 7 / 10
        assert cm.total == 10
        assert cm.per_class_accuracy() == [0.75, 4 / 6]

    def test_absent_class(self):
        cm = ConfusionMatrix(np.array([[2, 0], [0, 0]]))
        assert cm.per_class_accuracy() == [1.0, None]
        np.testing.assert_array_equal(cm.row_normalized, [[1.0, 0.0], [0.0, 0.0]])

    def test_normalisation_idempotent(self):
        counts = np.random.default_rng(2).integers(0, 9, (5, 5))
        once = normalize_rows(counts)
        np.testing.assert_allclose(once.sum(axis=1)[counts.sum(axis=1) > 0], 1.0, atol=1e-9)
        np.testing.assert_allclose(normalize_rows(once), once, rtol=0, atol=1e-12)

    def test_csv(self):
        text = ConfusionMatrix(np.array([[1, 0], [1, 1]])).to_csv(["a", "b"])
        assert text == "true\\pred,a,b\na,1,0\nb,1,1\n"

    def test_errors(self):
        bundle = bundle_with(LabelReader(2), 2)
        with pytest.raises(ValueError):
            evaluate(bundle, CloudArrays(np.zeros((0, 4, 3), np.float32), np.zeros(0, np.int64)))
        with pytest.raises(ValueError):
            evaluate(bundle, CloudArrays(np.zeros((2, 4, 3), np.float32), np.array([0, -1])))


# hand-computed means of the published rows, one decimal, half-even
REFERENCE_AVG_HAND = {"w/o Adapt": "34.9", "only AE": "40.3", "AE+L": "46.7", "Ours": "48.2",
                      "Supervised": "76.6"}


class TestCompareScenarios:
    def test_reference_rows(self):
        table = compare_scenarios(reference_reports())
        assert table.columns == list(TABLE_COLUMNS) + ["Avg"]
        for row, vals in REFERENCE_TABLE.items():
            assert [table.rows[row][c] for c in TABLE_COLUMNS] == [f"{v:.1f}" for v in vals]
            assert table.rows[row]["Avg"] == REFERENCE_AVG_HAND[row]

    def test_rounding_note(self):
        notes = compare_scenarios(reference_reports()).notes
        assert any("48.15" in n and "48.2" in n for n in notes)
        assert any("48.1" in n and "published" in n for n in notes)

    def test_byte_stable(self):
        a = compare_scenarios(reference_reports())
        b = compare_scenarios(reference_reports())
        assert a.text.encode() == b.text.encode()
        assert a.to_json() == b.to_json()

    def test_single_scenario_avg(self):
        t = compare_scenarios([{"scenario": "M→S", "results": {"w/o Adapt": 0.4, "Ours": {"accuracy": 0.625}}}])
        assert t.rows["Ours"]["M→S"] == t.rows["Ours"]["Avg"] == "62.5"
        assert t.rows["w/o Adapt"]["Avg"] == "40.0"

    def test_no_ablation_rows(self):
        t = compare_scenarios([{"scenario": "M→S", "results": {"w/o Adapt": 0.4, "Ours": 0.5}}])
        assert list(t.rows) == ["w/o Adapt", "Ours"]
        assert "AE+L" not in t.text

    def test_row_order_and_seed_average(self):
        reports = [{"scenario": "toy", "results": {"Ours": 0.5, "only AE": 0.3, "w/o Adapt": 0.2}},
                   {"scenario": "toy", "results": {"Ours": 0.7, "only AE": 0.3, "w/o Adapt": 0.4}}]
        t = compare_scenarios(reports)
        assert list(t.rows) == ["w/o Adapt", "only AE", "Ours"]
        assert t.rows["Ours"]["toy"] == "60.0"
        assert t.rows["w/o Adapt"]["toy"] == "30.0"

    def test_half_even(self):
        t = compare_scenarios([{"scenario": "a", "results": {"Ours": 0.1225}},
                               {"scenario": "b", "results": {"Ours": 0.1235}}])
        assert t.rows["Ours"]["a"] == "12.2"
        assert t.rows["Ours"]["b"] == "12.4"

    def test_empty(self):
        with pytest.raises(ValueError):
            compare_scenarios([])


class TestExport:
    def test_single_point_ply(self, tmp_path):
        path = write_ply(tmp_path / "one.ply", np.array([[0.5, -1.0, 2.0]]))
        lines = path.read_text().splitlines()
        assert "element vertex 1" in lines
        assert lines[lines.index("end_header") + 1:] == ["0.5 -1 2"]

    def test_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(1024, 3)).astype(np.float32)
        back = read_ply(write_ply(tmp_path / "c.ply", pts))
        assert back.shape == (1024, 3)
        assert "element vertex 1024" in (tmp_path / "c.ply").read_text()
        np.testing.assert_allclose(back, pts, rtol=1e-6)

    def test_styles(self, tmp_path, rng):
        group = {"obj0": {r: rng.normal(size=(32, 3)) for r in ("source", "synthetic", "target")}}
        ply = export_clouds(group, "ply", tmp_path / "p")
        assert sorted(p.name for p in ply) == ["obj0_source.ply", "obj0_synthetic.ply", "obj0_target.ply"]
        both = export_clouds(group, "both", tmp_path / "b")
        assert (tmp_path / "b" / "obj0.png").stat().st_size > 0
        assert len(both) == 4
        with pytest.raises(ValueError):
            export_clouds(group, "svg", tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            export_clouds({"o": {"source": np.zeros((2, 3))}}, "ply", blocker / "sub")

    def test_bad_ply(self, tmp_path):
        (tmp_path / "x.ply").write_text("ply\nelement vertex 3\nend_header\n0 0 0\n")
        with pytest.raises(ValueError):
            read_ply(tmp_path / "x.ply")


class TestSaveReport:
    def test_files(self, tmp_path):
        metrics = {"scenario": "toy", "results": {
            "w/o Adapt": {"accuracy": 0.5, "confusion": [[1, 1], [0, 0]]},
            "Ours": {"accuracy": 1.0, "confusion": [[2, 0], [0, 0]]}}}
        paths = save_report(metrics, tmp_path, ["a", "b"])
        names = sorted(p.name for p in paths)
        assert names == ["confusion_Ours.csv", "confusion_wo_Adapt.csv", "table.json", "table.txt"]
        table = json.loads((tmp_path / "table.json").read_text())
        assert table["rows"]["Ours"]["Avg"] == "100.0"
        assert (tmp_path / "confusion_wo_Adapt.csv").read_text().splitlines()[1] == "a,0.500000,0.500000"
