import json
import math

import numpy as np
import pytest

from conceptcox import cli
from conceptcox.data_model import fit_preprocessing
from conceptcox.modeling import (
    CONCEPT_PREFIX,
    FeatureSetVariant,
    ModelConfig,
    assemble_feature_set,
    design_matrix,
    train_model,
)
from conceptcox.pipeline import PipelineConfig, PipelineError, canonical_json, run_pipeline
from conceptcox.pu_concepts import AnchorSpec, ConceptModel, fit_concepts, load_anchor_specs
from conceptcox.sankey import export_sankey, sankey_svg
from conceptcox.survival import CoxFit
from conceptcox.synthcohort import GenConfig, default_anchor_config, generate_cohort

SMALL = {
    "synth": {"n_patients": 3000},
    "model": {"lambda_grid": [0.0, 0.2, 0.005]},
    "evaluation": {"n_boot": 50},
    "hazard_ratios": {"n_boot": 5},
    "seed": 11,
}
VARIANTS = [v.value for v in FeatureSetVariant]


@pytest.fixture(scope="module")
def prepped():
    cfg = GenConfig(n_patients=3000, seed=2)
    cohort, truth = generate_cohort(cfg)
    train, _ = fit_preprocessing(cohort)
    specs = load_anchor_specs(default_anchor_config(cfg))
    models, skipped = fit_concepts(train, specs)
    return train, specs, models, skipped


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    a = run_pipeline(dict(SMALL), base / "a")
    b = run_pipeline(dict(SMALL), base / "b")
    return a, b


class TestDesign:
    def test_variant_widths(self, prepped):
        train, specs, models, skipped = prepped
        assert not skipped
        n_concepts = len(specs)
        n_cont = sum(c.dtype == "continuous" for c in train.columns)
        n_all = len(train.column_names)
        widths = {v: design_matrix(train, models, v, specs)[0].shape[1] for v in FeatureSetVariant}
        assert widths == {
            FeatureSetVariant.RAW_ANCHORS: n_concepts,
            FeatureSetVariant.LC_ONLY: n_concepts,
            FeatureSetVariant.LC_PLUS_NUMERIC: n_concepts + n_cont,
            FeatureSetVariant.LC_PLUS_ALL: n_concepts + n_all,
            FeatureSetVariant.ALL_FEATURES: n_all,
        }
        assert n_cont == 4

    def test_concept_columns_are_posteriors(self, prepped):
        train, specs, models, _ = prepped
        data = assemble_feature_set(train, models, "lc_only")
        assert data.feature_names == tuple(CONCEPT_PREFIX + s.concept_name for s in specs)
        np.testing.assert_array_equal(data.X[:, 0], models[0].posteriors(train))
        assert np.all((data.X >= 0) & (data.X <= 1))

    def test_concept_variant_needs_models(self, prepped):
        train, specs, _, _ = prepped
        with pytest.raises(ValueError):
            design_matrix(train, [], "lc_only")

    def test_trained_model_applies_training_preprocessing(self):
        cfg = GenConfig(n_patients=2000, seed=5)
        cohort, _ = generate_cohort(cfg)
        train, test = cohort.select_rows(np.arange(1400)), cohort.select_rows(np.arange(1400, 2000))
        specs = load_anchor_specs(default_anchor_config(cfg))
        m = train_model(train, "lc_plus_numeric", specs, ModelConfig(lambda_selection="sparsity", target_nnz=5), seed=0)
        assert m.fit.nnz == pytest.approx(5, abs=2)
        X = m.design(test)
        np.testing.assert_allclose(m.risk(test), X @ m.fit.beta)
        assert json.loads(json.dumps(m.to_dict()))["variant"] == "lc_plus_numeric"

    def test_model_config_rejects_unknown(self):
        with pytest.raises((ValueError, TypeError)):
            ModelConfig.from_dict({"lambda": 0.1})
        with pytest.raises(ValueError):
            ModelConfig(lambda_selection="aic")


def toy_concept(name, weights, features, anchors):
    return ConceptModel(AnchorSpec(name, anchors), np.asarray(weights, float), 0.0, 0.5, tuple(features))


class TestSankey:
    def test_unused_concepts_hidden_and_top_k(self):
        c1 = toy_concept("a", [3.0, -2.0, 1.0, 0.0], ["p", "q", "r", "s"], ("a_code",))
        c2 = toy_concept("b", [1.0], ["p"], ("b_code",))
        fit = CoxFit(np.array([0.7, 0.0]), 0.01, ("lc:a", "lc:b"), True, 1)
        g = export_sankey([c1, c2], fit, top_k=2, model_label="m")
        assert {n.id for n in g.nodes if n.column == 1} == {"concept:a"}
        raw_edges = [e for e in g.edges if e.target == "concept:a" and not e.is_anchor]
        assert [(e.source, e.weight, e.sign) for e in raw_edges] == [("raw:p", 3.0, 1), ("raw:q", 2.0, -1)]
        (anchor,) = [e for e in g.edges if e.is_anchor]
        assert anchor.source == "raw:a_code" and anchor.weight == 3.0 and anchor.css_class == "anchor"
        assert [e for e in g.edges if e.target == "model:m"][0].weight == pytest.approx(0.7)

    def test_unknown_concept(self):
        fit = CoxFit(np.array([1.0]), 0.0, ("lc:zzz",), True, 1)
        with pytest.raises(KeyError):
            export_sankey([], fit)

    def test_svg_classes(self):
        c1 = toy_concept("a", [1.0, -1.0], ["p", "q"], ("a_code",))
        fit = CoxFit(np.array([0.5, -0.2]), 0.0, ("lc:a", "lab0"), True, 1)
        svg = sankey_svg(export_sankey([c1], fit))
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        for cls in ("anchor", "pos", "neg"):
            assert f'class="{cls}"' in svg

    def test_pipeline_graph_rules(self, runs):
        a, _ = runs
        lc = json.loads((a / "figures/sankey_lc_only.json").read_text())
        assert not any(e["source"].startswith("raw:") and e["target"].startswith("model:") for e in lc["edges"])
        assert any(e["is_anchor"] for e in lc["edges"])
        assert all(e["source"].endswith("_code") for e in lc["edges"] if e["is_anchor"])
        full = json.loads((a / "figures/sankey_all_features.json").read_text())
        assert not any(n["column"] == 1 for n in full["nodes"])
        for graph in (lc, full):
            assert all(e["weight"] >= 0 and e["sign"] in (1, -1) for e in graph["edges"])


class TestPipelineRun:
    def test_artifacts(self, runs):
        a, _ = runs
        report = json.loads((a / "report.json").read_text())
        assert 0.0 <= report["c_index"] <= 1.0
        assert report["primary_variant"] == "raw_anchors"
        assert set(report["variants"]) == set(VARIANTS)
        assert report["cohort"]["n_train"] + report["cohort"]["n_test"] == 3000
        for v in VARIANTS:
            assert (a / f"tables/hazard_ratios_{v}.csv").read_text().startswith("feature,coef,hr,hr_lo,hr_hi")
            for stem in ("km", "one_calibration", "d_calibration", "sankey"):
                assert (a / f"figures/{stem}_{v}.svg").is_file()
            d_cal = report["variants"][v]["d_calibration"]
            assert sum(r["mass"] for r in d_cal) == pytest.approx(1.0, abs=1e-9)
        concepts = (a / "tables/concepts.csv").read_text().splitlines()
        assert concepts[0].startswith("concept_name,delta_hat,true_delta,recall")
        assert len(concepts) == 7

    def test_lc_beats_raw_anchors(self, runs):
        report = json.loads((runs[0] / "report.json").read_text())
        assert report["variants"]["lc_only"]["c_index"] > report["variants"]["raw_anchors"]["c_index"]

    def test_byte_identical_repeat(self, runs):
        a, b = runs
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_manifest_hashes(self, runs):
        import hashlib

        a, _ = runs
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seed"] == 11
        for rel, digest in manifest["files"].items():
            assert hashlib.sha256((a / rel).read_bytes()).hexdigest() == digest

    def test_failure_leaves_nothing(self, tmp_path):
        cfg = {"cohort": "missing.csv", "anchors": [{"concept": "c", "anchors": ["c_code"]}]}
        out = tmp_path / "out"
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig.from_dict(cfg, base_dir=tmp_path), out)
        assert err.value.stage == "load"
        assert list(tmp_path.iterdir()) == []

    def test_refuses_foreign_directory(self, tmp_path):
        (tmp_path / "keep.txt").write_text("mine")
        with pytest.raises(PipelineError):
            run_pipeline(dict(SMALL), tmp_path, products={"synth"})
        assert (tmp_path / "keep.txt").read_text() == "mine"

    def test_rerun_replaces_previous_output(self, tmp_path):
        out = tmp_path / "o"
        run_pipeline(dict(SMALL), out, products={"synth"})
        (out / "stale.txt").write_text("x")
        run_pipeline(dict(SMALL), out, products={"synth"})
        assert not (out / "stale.txt").exists() and (out / "cohort.csv").is_file()


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"evaluaton": {}})
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"evaluation": {"horizn": 3}})

    def test_round_trip_hash(self):
        cfg = PipelineConfig.from_dict(SMALL)
        again = PipelineConfig.from_dict(cfg.to_dict())
        assert again.sha256() == cfg.sha256()
        assert PipelineConfig.from_dict({**SMALL, "seed": 12}).sha256() != cfg.sha256()

    def test_cohort_needs_anchors(self):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"cohort": "x.csv"})

    def test_canonical_json(self):
        assert canonical_json({"b": math.nan, "a": np.float64(1.5)}) == '{\n  "a": 1.5,\n  "b": null\n}\n'


class TestCli:
    def test_synth_then_file_based_eval(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path / "s"), "--seed", "4"]) == 0
        cohort = tmp_path / "s/cohort.csv"
        assert cohort.is_file() and (tmp_path / "s/truth.json").is_file()
        cfg = {
            **{k: v for k, v in SMALL.items() if k not in ("synth", "seed")},
            "cohort": str(cohort),
            "anchors": default_anchor_config(GenConfig()),
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        # global flags accepted after the command; one variant override
        code = cli.main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "e"), "--variant", "lc_only"])
        assert code == 0
        report = json.loads((tmp_path / "e/report.json").read_text())
        assert list(report["variants"]) == ["lc_only"] and report["cohort"]["source"] == "file"

    def test_flags_before_command(self, tmp_path):
        assert cli.main(["--out", str(tmp_path / "s"), "--seed", "1", "synth"]) == 0
        assert (tmp_path / "s/cohort.csv").is_file()

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(SystemExit) as err:
            cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert err.value.code == 2

    def test_bad_seed(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["synth", "--seed", "-1"])
        assert err.value.code == 2

    def test_stage_failure_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"cohort": "nope.csv", "anchors": [{"concept": "c", "anchors": ["x"]}]}))
        assert cli.main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "stage 'load' failed" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()
