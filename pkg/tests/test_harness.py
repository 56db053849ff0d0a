import csv
import io
import json
import warnings

import numpy as np
import pytest

from ietidp.assembly.system import Problem
from ietidp.errors import ConfigurationError
from ietidp.harness.cli import build_parser, config_from_args, main
from ietidp.harness.driver import (
    CaseConfig,
    SolveReport,
    build_case,
    direct_solve,
    error_norms,
    run_case,
)
from ietidp.harness.problems import PROBLEMS, grid_discretization, make_problem
from ietidp.harness.studies import REPORT_FIELDS, STUDY_FIELDS, emit_report, scaling_study
from ietidp.ieti import build_ieti

SCHEMA = [
    "dim", "patches", "degree", "refine", "form", "workers", "holders", "dofs", "n_primal",
    "n_multipliers", "iterations", "kappa", "assembling_time", "solving_time", "total_time",
    "l2_error", "dg_error", "messages_assembling", "bytes_assembling", "messages_solving",
    "bytes_solving", "solution_digest",
]
TIMING = {"assembling_time", "solving_time", "total_time"}


def laplacian_fd(u, x, h=1e-4):
    out = np.zeros(len(x))
    for a in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[a] = h
        out += (u(x + e) - 2 * u(x) + u(x - e)) / h ** 2
    return out


@pytest.mark.parametrize("name,dim", [(n, d) for n in PROBLEMS for d in PROBLEMS[n]])
def test_manufactured_solutions(name, dim, rng):
    prob = make_problem(name, dim)
    x = rng.uniform(0.05, 0.95, size=(20, dim))
    np.testing.assert_allclose(-laplacian_fd(prob.exact, x), prob.f(x), rtol=2e-5, atol=2e-3)
    h = 1e-6
    for a in range(dim):
        e = np.zeros(dim)
        e[a] = h
        fd = (prob.exact(x + e) - prob.exact(x - e)) / (2 * h)
        np.testing.assert_allclose(prob.exact_grad(x)[:, a], fd, atol=1e-6)


def test_benchmark_problem_formula():
    u = make_problem("benchmark", 2)
    x = np.array([[0.1, 0.2]])
    expected = np.sin(4 * np.pi * 0.5) * np.sin(2 * np.pi * 0.5) + 0.3
    assert u.exact(x)[0] == pytest.approx(expected)
    assert u.f(np.array([[0.225, 0.95]]))[0] == pytest.approx(20 * np.pi ** 2 * np.sin(2.5 * np.pi) * np.sin(2.5 * np.pi))
    with pytest.raises(ValueError):
        make_problem("nope", 2)


def quadratic_problem(dim):
    def u(x):
        return 1.0 + x[:, 0] ** 2 - 0.5 * x[:, 0] * x[:, -1]

    def grad(x):
        g = np.zeros_like(x)
        g[:, 0] = 2 * x[:, 0] - 0.5 * x[:, -1]
        g[:, -1] += -0.5 * x[:, 0]
        return g

    return Problem(f=lambda x: np.full(len(x), -2.0), g_D=u, exact=u, exact_grad=grad)


class TestErrorNorms:
    @pytest.mark.parametrize("form", ["cg", "dg"])
    def test_reproduces_polynomials(self, form):
        disc = grid_discretization(2, (2, 2), 2, 1, form, quadratic_problem(2))
        l2, edg = error_norms(disc, direct_solve(disc))
        assert l2 < 1e-10
        if form == "dg":
            # a square root of round-off sized terms
            assert edg < 1e-6
        else:
            assert edg is None

    def test_continuous_field_has_no_jump_contribution(self):
        cg = grid_discretization(2, (2, 2), 2, 1, "cg", quadratic_problem(2))
        dg = grid_discretization(2, (2, 2), 2, 1, "dg", quadratic_problem(2))
        ucg = direct_solve(cg) + 0.01 * np.arange(cg.dofmap.n_global) ** 0.5  # any continuous field
        udg = np.zeros(dg.dofmap.n_global)
        for pc, pd in zip(cg.dofmap.patches, dg.dofmap.patches):
            udg[pd.gids[: pd.n_own]] = ucg[pc.gids[: pc.n_own]]
        from ietidp.assembly.system import assemble_global, dg_norm

        P, _ = assemble_global(dg, penalty_only=True, with_load=False, volume=False)
        assert dg_norm(dg, udg, P) == pytest.approx(0.0, abs=1e-12)

    def test_order_p_plus_one(self):
        errs = []
        for r in (1, 2, 3):
            disc = grid_discretization(2, (2, 2), 2, r, "cg", "homogeneous")
            errs.append(error_norms(disc, direct_solve(disc))[0])
        rate = np.log2(errs[-2] / errs[-1])
        assert rate == pytest.approx(3.0, abs=0.2)


class TestConfig:
    def test_defaults(self):
        cfg = CaseConfig()
        assert cfg.patches == (4, 4) and cfg.tol == 1e-8 and cfg.n_patches == 16

    @pytest.mark.parametrize("kw", [dict(dim=4, patches=(1, 1, 1, 1)), dict(patches=(2, 0)), dict(tol=1.0),
                                    dict(workers=2, holders=3), dict(form="hdg"), dict(degree=0),
                                    dict(patches=(2, 2, 2)), dict(boundary="robin")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            CaseConfig(**kw)

    def test_scalar_patch_count(self):
        assert CaseConfig(dim=3, patches=2).patches == (2, 2, 2)


@pytest.fixture(scope="module")
def report_4x4():
    return run_case(CaseConfig(patches=(4, 4), degree=2, refine=2, form="cg"))


def test_run_case_matches_serial_oracle(report_4x4):
    disc = build_case(CaseConfig(patches=(4, 4), degree=2, refine=2))
    _, _, rep = build_ieti(disc).solve(tol=1e-8)
    assert report_4x4.iterations == rep.iterations
    assert report_4x4.iterations >= 1
    assert report_4x4.dofs == disc.dofmap.free_gids.size
    assert report_4x4.l2_error > 0 and report_4x4.dg_error is None
    assert min(report_4x4.assembling_time, report_4x4.solving_time) >= 0
    assert report_4x4.total_time == pytest.approx(report_4x4.assembling_time + report_4x4.solving_time)


def test_run_case_is_deterministic(report_4x4):
    again = run_case(CaseConfig(patches=(4, 4), degree=2, refine=2, form="cg", workers=2))
    a, b = report_4x4.to_dict(), again.to_dict()
    for key in SCHEMA:
        if key in TIMING or key.startswith(("messages_", "bytes_")) or key == "workers":
            continue
        assert a[key] == b[key], key


def test_dg_iterations_bounded_by_cg(report_4x4):
    dg = run_case(CaseConfig(patches=(4, 4), degree=2, refine=2, form="dg"))
    assert dg.dg_error is not None and dg.dg_error > 0
    assert report_4x4.iterations <= dg.iterations <= 2 * report_4x4.iterations


def test_mixed_boundary_solves():
    cfg = CaseConfig(patches=(2, 2), degree=2, refine=2, boundary="mixed")
    disc = build_case(cfg)
    assert disc.topology.neumann_sides == [(1, 1), (3, 1)]
    rep = run_case(cfg)
    ref = error_norms(disc, direct_solve(disc))[0]
    assert rep.l2_error == pytest.approx(ref, rel=1e-6)


class TestReports:
    def test_schema(self):
        assert SolveReport.field_names() == SCHEMA == REPORT_FIELDS
        assert STUDY_FIELDS == SCHEMA + ["speedup", "efficiency"]

    def test_csv_single_row(self, report_4x4, tmp_path):
        path = tmp_path / "r.csv"
        emit_report([report_4x4], "csv", path)
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        assert len(rows) == 1 and list(rows[0]) == SCHEMA
        assert len(path.read_text().splitlines()) == 2

    def test_json_roundtrip(self, report_4x4):
        back = json.loads(emit_report([report_4x4], "json"))
        assert [SolveReport(**r) for r in back] == [report_4x4]

    def test_errors(self, report_4x4, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], "json")
        with pytest.raises(ValueError):
            emit_report([report_4x4], "xml")
        with pytest.raises(OSError):
            emit_report([report_4x4], "json", tmp_path / "missing" / "r.json")


def fake_runner(times):
    it = iter(times)

    def run(cfg):
        rep = dict.fromkeys(SCHEMA, 0)
        rep.update(workers=cfg.workers, holders=cfg.holders, total_time=next(it))
        return SolveReport(**rep)

    return run


class TestScaling:
    def test_strong_speedup(self):
        rows = scaling_study("strong", CaseConfig(), [{"workers": 1}, {"workers": 2}, {"workers": 4}],
                             runner=fake_runner([8.0, 4.0, 4.0]))
        assert [r["speedup"] for r in rows] == [1.0, 2.0, 2.0]
        assert [r["efficiency"] for r in rows] == [1.0, 1.0, 0.5]
        assert list(rows[0]) == STUDY_FIELDS

    def test_strong_speedup_from_larger_base(self):
        rows = scaling_study("strong", CaseConfig(workers=2), [{"workers": 2}, {"workers": 4}],
                             runner=fake_runner([4.0, 2.0]))
        assert rows[1]["speedup"] == 4.0

    def test_oversubscription_warns(self):
        with pytest.warns(RuntimeWarning):
            scaling_study("strong", CaseConfig(), [{"workers": 4096}], runner=fake_runner([1.0]))

    def test_bad_study(self):
        with pytest.raises(ValueError):
            scaling_study("diagonal", CaseConfig(), runner=fake_runner([1.0]))
        with pytest.raises(ValueError):
            scaling_study("weak", CaseConfig(), [], runner=fake_runner([1.0]))

    def test_holder_study_values_identical(self):
        base = CaseConfig(patches=(4, 2), degree=2, refine=1, workers=4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rows = scaling_study("holders", base)
        assert [r["holders"] for r in rows] == [1, 2, 4]
        keys = [k for k in SCHEMA if k not in TIMING and k != "holders" and not k.startswith(("messages", "bytes"))]
        for r in rows[1:]:
            assert {k: r[k] for k in keys} == {k: rows[0][k] for k in keys}


class TestCli:
    def test_flags_override_config_file(self, tmp_path):
        cfgfile = tmp_path / "case.json"
        cfgfile.write_text(json.dumps({"degree": 3, "refine": 1, "patches": [2, 2], "form": "dg"}))
        args = build_parser().parse_args(["solve", "--config", str(cfgfile), "--degree", "2",
                                          "--deterministic", "off"])
        cfg = config_from_args(args)
        assert (cfg.degree, cfg.refine, cfg.patches, cfg.form, cfg.deterministic) == (2, 1, (2, 2), "dg", False)

    def test_single_patch_value_expands(self):
        cfg = config_from_args(build_parser().parse_args(["solve", "--dim", "3", "--patches", "2"]))
        assert cfg.patches == (2, 2, 2)

    def test_unknown_config_field(self, tmp_path):
        cfgfile = tmp_path / "case.json"
        cfgfile.write_text(json.dumps({"colour": "red"}))
        with pytest.raises(SystemExit):
            config_from_args(build_parser().parse_args(["solve", "--config", str(cfgfile)]))

    def test_solve_writes_json(self, tmp_path):
        out = tmp_path / "r.json"
        assert main(["solve", "--patches", "2", "2", "--degree", "2", "--refine", "1", "--workers", "2",
                     "--out", str(out)]) == 0
        (row,) = json.loads(out.read_text())
        assert list(row) == SCHEMA and row["workers"] == 2 and row["patches"] == "2x2"

    def test_scale_holders_csv(self, tmp_path, capsys):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert main(["scale-holders", "--patches", "2", "2", "--refine", "1", "--workers", "2",
                         "--schedule", '[{"holders": 1}, {"holders": 2}]', "--format", "csv"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert [r["holders"] for r in rows] == ["1", "2"]
        assert rows[0]["solution_digest"] == rows[1]["solution_digest"]

    def test_module_entry_point(self):
        import subprocess
        import sys

        res = subprocess.run([sys.executable, "-m", "ietidp", "solve", "--patches", "2", "2", "--refine", "1",
                              "--format", "csv"], capture_output=True, text=True, timeout=300)
        assert res.returncode == 0, res.stderr
        assert res.stdout.splitlines()[0].split(",") == SCHEMA
