from __future__ import annotations

import json
from pathlib import Path

import pytest

from prycecap.config import ConfigError, instance_from_dict, instance_to_dict, load_instance
from prycecap.probkit import Power, Uniform


def base_doc(**firm):
    spec = {"dist": {"family": "uniform", "lower": 0.0, "upper": 1.0}, "weight": {"type": "full"},
            "kappa": 1.0}
    spec.update(firm)
    return {
        "firms": [spec, dict(spec)],
        "values": {"mode": "independent", "params": {"marginal": {"family": "uniform"}}},
    }


class TestParse:
    def test_minimal(self):
        inst = instance_from_dict(base_doc())
        assert inst.n == 2
        assert inst.firms[0].dist == Uniform(0.0, 1.0)
        assert inst.kappa.tolist() == [1.0, 1.0]

    def test_defaults_for_weight_and_kappa(self):
        doc = base_doc()
        for f in doc["firms"]:
            del f["weight"], f["kappa"]
        inst = instance_from_dict(doc)
        assert inst.kappa.tolist() == [0.0, 0.0]

    def test_seed_override(self):
        doc = base_doc()
        doc["integration"] = {"seed": 3}
        assert instance_from_dict(doc).integrator.seed == 3
        assert instance_from_dict(doc, seed=11).integrator.seed == 11

    def test_round_trip(self):
        doc = base_doc(dist={"family": "power", "lower": 0.0, "upper": 1.0, "exponent": 2.0})
        doc["grids"] = {"types": 128}
        inst = instance_from_dict(doc)
        again = instance_from_dict(json.loads(json.dumps(instance_to_dict(inst))))
        assert again.firms == inst.firms
        assert again.grids == inst.grids
        assert again.integrator == inst.integrator
        assert isinstance(again.firms[0].dist, Power)

    def test_shipped_configs_load(self):
        configs = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
        assert configs
        for path in configs:
            assert load_instance(path).n >= 1


class TestErrors:
    def test_negative_kappa_names_field(self):
        with pytest.raises(ConfigError, match=r"firms\[0\]\.kappa"):
            instance_from_dict(base_doc(kappa=-0.5))

    @pytest.mark.parametrize("doc, path", [
        ({}, "firms"),
        ({"firms": []}, "firms"),
        ({"firms": [{"weight": {}}]}, r"firms\[0\]\.dist"),
        ({"firms": [{"dist": {"family": "uniform"}}]}, "values"),
    ])
    def test_missing_sections(self, doc, path):
        with pytest.raises(ConfigError, match=path):
            instance_from_dict(doc)

    def test_bad_distribution(self):
        with pytest.raises(ConfigError, match=r"firms\[0\]\.dist"):
            instance_from_dict(base_doc(dist={"family": "uniform", "lower": 1.0, "upper": 0.5}))

    def test_weight_above_cdf(self):
        with pytest.raises(ConfigError, match=r"firms\[0\]\.weight"):
            instance_from_dict(base_doc(weight={"type": "scaled", "alpha": 1.5}))

    def test_unknown_grid_field(self):
        doc = base_doc()
        doc["grids"] = {"bogus": 3}
        with pytest.raises(ConfigError, match=r"grids\.bogus"):
            instance_from_dict(doc)

    def test_non_integer_seed(self):
        doc = base_doc()
        doc["integration"] = {"seed": 1.5}
        with pytest.raises(ConfigError, match=r"integration\.seed"):
            instance_from_dict(doc)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_instance(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{firms: ")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_instance(path)

    def test_is_value_error(self):
        assert issubclass(ConfigError, ValueError)
