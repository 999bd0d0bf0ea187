import csv
import json
import math

import pytest

from cme_rates import cli
from cme_rates.errors import UsageError

SMALL = {
    "spectrum": {"p": 0.5, "n_trunc": 64},
    "experiment": {"ns": [32, 64, 128, 256], "replicates": 5},
    "variance": {"n": 512, "replicates": 20},
    "lowerbound": {"max_members": 4, "probe_ns": [32, 64, 128, 256], "probe_replicates": 2},
    "concentration": {"ns": [16], "taus": [2.0], "trials": 500},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, sub, cfg=SMALL, out="out", extra=()):
    out_dir = tmp_path / out
    code = cli.main([sub, "--config", _write(tmp_path, cfg), "--out-dir", str(out_dir), *extra])
    return code, out_dir


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = cli.resolve_config({})
        assert cfg["schedule.alpha"] == 0.55 and cfg["experiment.replicates"] == 20
        assert set(cfg) == set(cli.DEFAULTS)

    def test_nested_and_dotted(self):
        a = cli.resolve_config({"source": {"beta": 1.5}})
        b = cli.resolve_config({"source.beta": 1.5})
        assert a == b and a["source.beta"] == 1.5

    def test_int_promoted(self):
        assert isinstance(cli.resolve_config({"source": {"beta": 1}})["source.beta"], float)

    def test_unknown_key_lists_valid(self):
        with pytest.raises(UsageError) as info:
            cli.resolve_config({"spectrum": {"q": 1}})
        assert "spectrum.q" in str(info.value) and "spectrum.p" in str(info.value)

    @pytest.mark.parametrize("raw", [{"seed": "zero"}, {"schedule": {"calibrate": 1}}, {"experiment": {"replicates": True}}])
    def test_type_mismatch(self, raw):
        with pytest.raises(UsageError, match="expects"):
            cli.resolve_config(raw)

    def test_regime_mismatch(self):
        with pytest.raises(UsageError, match="inconsistent"):
            cli.resolve_config({"schedule": {"regime": "log_regime"}})
        cli.resolve_config({"schedule": {"regime": "poly_regime"}})

    def test_gamma_not_below_beta(self):
        with pytest.raises(UsageError):
            cli.resolve_config({"experiment": {"gamma": 1.0}})

    def test_bad_lists(self):
        with pytest.raises(UsageError):
            cli.resolve_config({"experiment": {"ns": [32, -1]}})

    def test_hash_stable(self):
        assert cli.config_hash(cli.resolve_config({})) == cli.config_hash(cli.resolve_config({}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            cli.parse_config(tmp_path / "absent.json")


class TestExitCodes:
    def test_unknown_subcommand(self, tmp_path, capsys):
        assert cli.main(["plot", "--out-dir", str(tmp_path)]) == 1

    def test_bad_config(self, tmp_path):
        code, _ = _run(tmp_path, "rates", {"spectrum": {"p": 2.0}})
        assert code == 1

    def test_bad_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CME_THREADS", "many")
        code, _ = _run(tmp_path, "diagnostics", SMALL)
        assert code == 1

    def test_science_failure(self, tmp_path, capsys):
        cfg = json.loads(json.dumps(SMALL))
        cfg["experiment"]["slope_tol"] = 0.0
        code, _ = _run(tmp_path, "rates", cfg)
        assert code == 2
        assert "rate slope:" in capsys.readouterr().out

    def test_construction_failure(self, tmp_path):
        cfg = json.loads(json.dumps(SMALL))
        cfg["lowerbound"]["budget"] = 1
        code, _ = _run(tmp_path, "lowerbound", cfg)
        assert code == 2


class TestOutputs:
    @pytest.mark.parametrize("sub", ["bias", "lowerbound", "concentration", "diagnostics"])
    def test_success_and_manifest(self, tmp_path, sub, capsys):
        code, out = _run(tmp_path, sub)
        text = capsys.readouterr().out
        assert code == 0, text
        assert "FAIL" not in text and "PASS" in text
        man = json.loads((out / f"{sub}_manifest.json").read_text())
        assert man["config"] == cli.resolve_config(SMALL)
        assert man["config_hash"] == cli.config_hash(man["config"])
        assert man["seed"] == 0 and man["subcommand"] == sub
        for path in man["output_paths"]:
            rows = _rows(path)
            name = path.rsplit("/", 1)[-1]
            assert rows[0] == man["columns"][name]
            assert all(len(r) == len(rows[0]) for r in rows)
            for r in rows[1:]:
                assert not any(v in ("nan", "inf", "-inf") for v in r), (name, r)

    def test_rates_outputs(self, tmp_path, capsys):
        code, out = _run(tmp_path, "rates", extra=("--threads", "2"))
        assert code in (0, 2)
        rec = _rows(out / "rates_records.csv")
        assert rec[0] == ["n", "replicate", "lambda", "gamma", "err_sq", "guard_ok"]
        assert len(rec) == 1 + 4 * 5
        summary = _rows(out / "rates_summary.csv")
        assert {"slope", "slope_se", "theoretical"} <= set(summary[0])

    def test_byte_identical(self, tmp_path):
        _run(tmp_path, "rates", out="a")
        _run(tmp_path, "rates", out="b", extra=("--threads", "3"))
        for name in ("rates_records.csv", "rates_medians.csv", "rates_summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CME_SEED", "17")
        _, out = _run(tmp_path, "concentration", out="env")
        assert json.loads((out / "concentration_manifest.json").read_text())["seed"] == 17
        _, out = _run(tmp_path, "concentration", out="flag", extra=("--seed", "5"))
        assert json.loads((out / "concentration_manifest.json").read_text())["seed"] == 5
        monkeypatch.delenv("CME_SEED")
        _run(tmp_path, "rates", out="r0")
        _run(tmp_path, "rates", out="r5", extra=("--seed", "5"))
        assert (tmp_path / "r0" / "rates_records.csv").read_bytes() != (tmp_path / "r5" / "rates_records.csv").read_bytes()

    def test_float_round_trip(self, tmp_path):
        _, out = _run(tmp_path, "bias")
        rows = _rows(out / "bias.csv")
        col = rows[0].index("lambda")
        lams = sorted({float(r[col]) for r in rows[1:]})
        assert lams == sorted(cli.DEFAULTS["bias.lambdas"][0])
        assert all(math.isfinite(v) for v in lams)
