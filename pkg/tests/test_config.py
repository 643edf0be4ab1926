import copy

import numpy as np
import pytest

from ifpopt.config import (
    BUILTIN_ALIASES,
    ConfigError,
    SCHEMA,
    apply_overrides,
    build,
    builtin_names,
    config_hash,
    load,
    load_builtin,
    load_toml,
    validate_schema,
)

RING = [[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0]]


def ex2_raw(**extra):
    raw = {
        "name": "t",
        "objectives": [{"kind": "example2", "index": i} for i in range(1, 5)],
        "agents": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
        "graph": {"adjacency": RING},
        "gain": {"kind": "constant", "value": 0.005},
        "initial": {"x": [2.0, 2.3, 2.7, 3.0]},
        "sim": {"dt": 0.01, "t_end": 1.0},
    }
    raw.update(extra)
    return raw


class TestSchema:
    def test_valid(self):
        validate_schema(ex2_raw())

    @pytest.mark.parametrize(
        "mutate, path",
        [
            (lambda r: r["agents"].update(alpha=-1.0), "agents.alpha"),
            (lambda r: r["sim"].update(dt="fast"), "sim.dt"),
            (lambda r: r["objectives"][2].update(kind="cubic"), "objectives[2].kind"),
            (lambda r: r["gain"].update(kind="pid"), "gain.kind"),
            (lambda r: r.update(colour="red"), "<root>"),
            (lambda r: r["agents"].update(nu=[-1.0, 0.5, -1.0, -1.0]), "agents.nu[1]"),
        ],
    )
    def test_errors_name_field(self, mutate, path):
        raw = ex2_raw()
        mutate(raw)
        with pytest.raises(ConfigError) as exc:
            validate_schema(raw)
        assert exc.value.path == path

    def test_graph_xor_schedule(self):
        raw = ex2_raw(schedule={"modes": [RING], "dwell": 1.0})
        with pytest.raises(ConfigError):
            validate_schema(raw)
        raw = ex2_raw()
        del raw["graph"]
        with pytest.raises(ConfigError):
            validate_schema(raw)

    def test_schema_is_valid_draft(self):
        import jsonschema
        jsonschema.Draft202012Validator.check_schema(SCHEMA)


class TestBuild:
    def test_example2_defaults(self):
        exp = build(ex2_raw())
        assert exp.algorithm == "alg1" and exp.seed == 0
        np.testing.assert_allclose(exp.computed_nus, [-90.0, -340 / 9, -20.0, -12.0], atol=1e-6)
        np.testing.assert_allclose(exp.design_nus, exp.computed_nus)
        assert exp.pinned_nus is None
        assert exp.ujsc_window == 0.0
        assert exp.admissibility == []
        assert exp.problem.optimum.x_star[0] == pytest.approx(20 / 7)

    def test_default_initial_state(self):
        raw = ex2_raw()
        del raw["initial"]
        exp = build(raw)
        np.testing.assert_allclose(exp.init.x.ravel(), np.linspace(0, 1, 4))
        np.testing.assert_array_equal(exp.init.lam, 0.0)

    def test_initial_multiplier_sum(self):
        raw = ex2_raw(initial={"x": [2.0, 2.3, 2.7, 3.0], "lam": [1.0, 0.0, 0.0, 0.0]})
        with pytest.raises(ConfigError, match=r"initial condition sum_i K_i lam_i\(0\) = 0 violated") as exc:
            build(raw)
        assert exc.value.path == "initial.lam"

    def test_balanced_nonzero_multipliers_accepted(self):
        exp = build(ex2_raw(initial={"x": [2.0, 2.3, 2.7, 3.0], "lam": [1.0, -1.0, 0.5, -0.5]}))
        assert exp.init.lam[0, 0] == 1.0

    def test_kj_condition(self):
        raw = ex2_raw()
        raw["agents"].update(J=[[[1.0]], [[0.5]], [[1.0]], [[1.0]]])
        with pytest.raises(ConfigError, match="K_i J_i = C\\^T violated"):
            build(raw)

    def test_unbalanced_graph(self):
        raw = ex2_raw(graph={"adjacency": [[0, 1, 1, 0], [0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0]]})
        with pytest.raises(ConfigError, match="weight-balanced"):
            build(raw)

    def test_empty_graph(self):
        with pytest.raises(ConfigError, match="no edges"):
            build(ex2_raw(graph={"adjacency": np.zeros((4, 4)).tolist()}))

    def test_not_jointly_connected(self):
        pair = [[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]]
        with pytest.raises(ConfigError, match="jointly strongly connected"):
            build(ex2_raw(graph={"adjacency": pair}))

    def test_inadmissible_gain_names_bound(self):
        raw = ex2_raw(gain={"kind": "constant", "value": 0.1})
        with pytest.raises(ConfigError, match="degree-based gain bound violated"):
            build(raw)
        exp = build(raw, allow_inadmissible_gain=True)
        assert exp.admissibility and exp.sim.allow_inadmissible_gain
        assert build(dict(raw, allow_inadmissible_gain=True)).admissibility

    def test_alg2_accepts_large_gain(self):
        exp = build(ex2_raw(algorithm="alg2", gain={"kind": "constant", "value": 0.1}))
        assert exp.admissibility == []

    def test_pinned_indices(self):
        raw = ex2_raw()
        raw["agents"]["nu"] = [-89.96, -37.77, -20.0, -12.0]
        exp = build(raw)
        np.testing.assert_allclose(exp.design_nus, [-89.96, -37.77, -20.0, -12.0])
        np.testing.assert_allclose(exp.pinned_nus, [-89.96, -37.77, -20.0, -12.0])
        np.testing.assert_allclose(exp.problem.certified_nus, exp.computed_nus)

    def test_wrong_agent_count(self):
        raw = ex2_raw()
        raw["agents"]["nu"] = [-1.0, -1.0]
        with pytest.raises(ConfigError) as exc:
            build(raw)
        assert exc.value.path == "agents.nu"

    def test_objective_missing_field(self):
        raw = ex2_raw()
        raw["objectives"][1] = {"kind": "quadratic", "Q": [[1.0]]}
        with pytest.raises(ConfigError) as exc:
            build(raw)
        assert exc.value.path == "objectives[1]"

    def test_vector_quadratics(self):
        raw = {
            "objectives": [{"kind": "quadratic", "Q": [[2.0, 0.0], [0.0, 1.0]], "c": [1.0, -1.0]},
                           {"kind": "scaled_quadratic", "scale": 1.0, "center": [3.0, 1.0]}],
            "agents": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
            "graph": {"adjacency": [[0, 1], [1, 0]]},
            "gain": {"kind": "constant", "value": 0.01},
            "initial": {"x": [[0.0, 0.0], [1.0, 1.0]]},
        }
        exp = build(raw)
        # per coordinate: 2(x-1) + 2(x-3) = 0 and (y+1) + 2(y-1) = 0
        np.testing.assert_allclose(exp.problem.optimum.x_star, [2.0, 1 / 3])

    def test_bad_expression(self):
        with pytest.raises(ConfigError) as exc:
            build(ex2_raw(gain={"kind": "expression", "expr": "__import__('os')"}))
        assert exc.value.path == "gain"


class TestSchedules:
    def test_random_schedule_seeded(self):
        raw = load_builtin("example1-case2")
        a = build(apply_overrides(raw, t_end=5.0))
        b = build(apply_overrides(raw, t_end=5.0))
        c = build(apply_overrides(raw, t_end=5.0, seed=7))
        assert a.mode_sequence == b.mode_sequence
        assert a.mode_sequence != c.mode_sequence
        assert len(a.mode_sequence) == 50
        assert a.ujsc_window is not None and a.ujsc_window > 0

    def test_per_subgraph_anchor_follows_agent(self):
        exp = build(apply_overrides(load_builtin("example1-case2"), t_end=5.0))
        gains = exp.problem.gains
        for key in range(3):
            idx = gains.profile_indices(key)
            assert idx[1] == 0  # agent 2 always on the first profile
            assert sorted(idx) == [0, 0, 1, 1]

    def test_literal_amplitude_needs_flag(self):
        raw = apply_overrides(load_builtin("example1-case2-literal"), t_end=5.0)
        with pytest.raises(ConfigError, match="gain"):
            build(raw)
        assert build(raw, allow_inadmissible_gain=True).admissibility


class TestLoading:
    def test_builtins_all_build(self):
        names = builtin_names()
        assert {"example1-case1", "example1-case2", "example2-alg1-sigma0.1", "example2-alg2-sigma0.1"} <= set(names)
        for name in names:
            raw = load_builtin(name)
            assert raw["anchor"]
            exp = build(apply_overrides(raw, t_end=1.0), allow_inadmissible_gain=True)
            assert exp.name == name

    def test_aliases(self):
        for alias, target in BUILTIN_ALIASES.items():
            assert load_builtin(alias) == load_builtin(target)

    def test_unknown_builtin(self):
        with pytest.raises(ConfigError, match="unknown builtin"):
            load_builtin("example9")

    def test_toml_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(
            'objectives = [{kind = "example2", index = 1}, {kind = "example2", index = 2}]\n'
            "[agents]\nalpha = 1.0\nbeta = 1.0\ngamma = 1.0\n"
            "[graph]\nadjacency = [[0.0, 1.0], [1.0, 0.0]]\n"
            '[gain]\nkind = "constant"\nvalue = 0.001\n'
        )
        exp = build(load(path=p))
        assert exp.network.n == 2

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[agents\n")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_toml(p)

    def test_load_needs_one_source(self):
        with pytest.raises(ConfigError):
            load()

    def test_hash_stable(self):
        raw = ex2_raw()
        shuffled = dict(reversed(list(copy.deepcopy(raw).items())))
        assert config_hash(raw) == config_hash(shuffled)
        assert config_hash(raw) != config_hash(apply_overrides(raw, dt=0.02))

    def test_overrides(self):
        raw = apply_overrides(ex2_raw(), seed=3, dt=0.5, t_end=2.0, gain_expr="0.001")
        assert raw["seed"] == 3 and raw["sim"]["dt"] == 0.5 and raw["sim"]["t_end"] == 2.0
        assert raw["gain"] == {"kind": "expression", "expr": "0.001"}
