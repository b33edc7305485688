import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enot.config import SCHEMA, BadConfig, RunConfig, preset_config
from enot.checkpoint import (CorruptCheckpoint, load_checkpoint,
                             save_checkpoint)
from enot.ot_core import EnotConfig, OptimizerSettings, init_train_state
from enot.nn import ArchitectureSpec


def _value_strategy(section, key, typ):
    if (section, key) == ("enot", "tau"):
        return st.floats(0.5, 0.99)
    if (section, key) == ("enot", "map_parametrization"):
        return st.just("residual_mlp")
    if (section, key) == ("enot", "bidirectional"):
        return st.just(False)
    if (section, key) == ("enot", "cost"):
        return st.sampled_from(["half_sq_euclidean", "sq_euclidean",
                                "euclidean"])
    if (section, key) == ("task", "kind"):
        return st.sampled_from(["gaussian_pair", "translation", "identity",
                                "mix_pair"])
    if (section, key) == ("model_f", "activation") or \
            (section, key) == ("model_g", "activation"):
        return st.sampled_from(["elu", "smoothed_elu", "leaky_relu"])
    if typ == "int":
        return st.integers(1, 10_000)
    if typ == "float":
        return st.floats(1e-6, 10.0)
    if typ == "bool":
        return st.booleans()
    if typ == "floats":
        return st.lists(st.floats(0.1, 0.999), min_size=2, max_size=2).map(tuple)
    if typ == "ints":
        return st.lists(st.integers(1, 256), min_size=1, max_size=4).map(tuple)
    return st.text(alphabet="abcdefgh_/", min_size=1, max_size=12)


@st.composite
def run_configs(draw):
    data = {}
    for section, options in SCHEMA.items():
        data[section] = {}
        for key, (typ, _default) in options.items():
            data[section][key] = draw(_value_strategy(section, key, typ))
    return RunConfig.from_dict(data)


class TestRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(run_configs())
    def test_ini_round_trip_is_identity(self, cfg):
        assert RunConfig.from_ini_text(cfg.to_ini_text()) == cfg

    def test_defaults_round_trip(self):
        cfg = RunConfig.defaults()
        assert RunConfig.from_ini_text(cfg.to_ini_text()) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig.defaults().with_overrides(
            ["enot.tau=0.77", "model_f.hidden=32,16", "run.seed=5"])
        path = tmp_path / "cfg.ini"
        cfg.save(path)
        assert RunConfig.load(path) == cfg


class TestOverrides:
    def test_override_changes_value(self):
        cfg = RunConfig.defaults().with_overrides(["enot.lambda=0.7"])
        assert cfg.get("enot", "lambda") == 0.7

    def test_unknown_key_rejected(self):
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(["enot.nonsense=1"])

    def test_malformed_override_rejected(self):
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(["enot.tau"])
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(["tau=0.9"])

    def test_bad_value_rejected(self):
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(["enot.tau=not_a_number"])

    def test_unknown_section_in_dict(self):
        with pytest.raises(BadConfig):
            RunConfig.from_dict({"bogus": {"x": "1"}})


class TestDerived:
    def test_enot_config_types(self):
        cfg = RunConfig.defaults()
        enot = cfg.enot_config()
        assert isinstance(enot, EnotConfig)
        assert enot.cost.kind == "half_sq_euclidean"

    def test_seed_derivation_deterministic(self):
        a = RunConfig.defaults().seeds()
        b = RunConfig.defaults().seeds()
        assert a == b
        c = RunConfig.defaults().with_overrides(["run.seed=9"]).seeds()
        assert c != a

    def test_task_seed_falls_back_to_run_seed(self):
        cfg = RunConfig.defaults().with_overrides(["run.seed=17"])
        assert cfg.seeds()[1] == 17
        cfg2 = cfg.with_overrides(["task.seed=4"])
        assert cfg2.seeds()[1] == 4

    def test_validate_catches_cost_task_mismatch(self):
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(
                ["enot.cost=sphere_geodesic"]).validate()
        with pytest.raises(BadConfig):
            RunConfig.defaults().with_overrides(
                ["task.kind=sphere_pair"]).validate()

    def test_build_task_kinds(self):
        for kind, extra in [("gaussian_pair", []), ("translation", []),
                            ("identity", []), ("mix_pair", []),
                            ("circles_moons", [])]:
            cfg = RunConfig.defaults().with_overrides(
                [f"task.kind={kind}", *extra])
            task = cfg.build_task()
            assert task.source.dim == 2

    def test_presets_are_valid(self):
        for name in ("high_dim", "synthetic_2d", "celeba_mlp"):
            cfg = preset_config(name)
            cfg.validate()
        assert preset_config("synthetic_2d").get("enot", "batch_size") == 10_000
        assert preset_config("high_dim").get("optimizer", "betas_g") == (0.9, 0.7)
        with pytest.raises(BadConfig):
            preset_config("nope")


class TestCheckpoint:
    def _state(self):
        cfg = EnotConfig(train_steps=3, batch_size=8, f_init_seed=4,
                         g_init_seed=5)
        arch = ArchitectureSpec((8, 8), "elu")
        state = init_train_state(cfg, 2, arch, arch, OptimizerSettings())
        state.step = 3
        state.status = "converged"
        state.opt_f.m[:] = np.random.default_rng(0).normal(size=state.opt_f.m.size)
        state.opt_f.step = 3
        return state

    def test_round_trip(self, tmp_path):
        state = self._state()
        cfg = RunConfig.defaults().with_overrides(["enot.train_steps=3"])
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, cfg, state)
        cfg2, state2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert state2.step == 3 and state2.status == "converged"
        assert np.array_equal(state2.f.params, state.f.params)
        assert np.array_equal(state2.g.params, state.g.params)
        assert np.array_equal(state2.opt_f.m, state.opt_f.m)
        assert state2.opt_f.step == 3
        assert state2.opt_g.beta2 == state.opt_g.beta2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        state = self._state()
        path = tmp_path / "b.ckpt"
        save_checkpoint(path, RunConfig.defaults(), state)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        state = self._state()
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, RunConfig.defaults(), state)
        with open(path, "ab") as fh:
            fh.write(b"extra")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "missing.ckpt")
