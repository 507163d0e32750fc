import pytest

from rsfme.config import (coerce_float, coerce_int, format_resolved,
                          load_config_file, parse_kv, render_kv, resolve)
from rsfme.errors import ConfigError


class TestParseKv:
    def test_basic_pairs(self):
        text = "seed = 3\nvariant=rs-fme-swint\n"
        assert parse_kv(text) == {"seed": "3", "variant": "rs-fme-swint"}

    def test_comments_and_blanks_skipped(self):
        text = "# run settings\n\nseed = 1\n   # trailing comment line\n"
        assert parse_kv(text) == {"seed": "1"}

    def test_value_may_contain_equals(self):
        assert parse_kv("note = a=b\n") == {"note": "a=b"}

    def test_missing_equals_rejected_with_line_number(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_kv("seed = 1\nbroken line\n")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError, match="empty key"):
            parse_kv("= 5\n")

    def test_render_round_trip(self):
        mapping = {"seed": 3, "dropout": 0.5}
        assert parse_kv(render_kv(mapping)) == {"seed": "3", "dropout": "0.5"}


class TestResolve:
    DEFAULTS = {"seed": 0, "rounds": 1, "fmt": "png"}

    def test_defaults_pass_through(self):
        assert resolve(self.DEFAULTS, env={}) == self.DEFAULTS

    def test_file_overrides_defaults(self):
        merged = resolve(self.DEFAULTS, file_values={"rounds": "4"}, env={})
        assert merged["rounds"] == "4"

    def test_flags_override_file(self):
        merged = resolve(self.DEFAULTS, file_values={"rounds": "4"},
                         flag_values={"rounds": 9}, env={})
        assert merged["rounds"] == 9

    def test_none_flag_means_not_given(self):
        merged = resolve(self.DEFAULTS, flag_values={"rounds": None}, env={})
        assert merged["rounds"] == 1

    def test_env_seed_sits_between_defaults_and_file(self):
        env = {"RSFME_SEED": "42"}
        assert resolve(self.DEFAULTS, env=env)["seed"] == 42
        merged = resolve(self.DEFAULTS, file_values={"seed": "7"}, env=env)
        assert merged["seed"] == "7"

    def test_env_seed_ignored_when_key_absent(self):
        merged = resolve({"fmt": "png"}, env={"RSFME_SEED": "42"})
        assert "seed" not in merged

    def test_env_seed_must_be_integer(self):
        with pytest.raises(ConfigError, match="RSFME_SEED"):
            resolve(self.DEFAULTS, env={"RSFME_SEED": "lots"})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="config file"):
            resolve(self.DEFAULTS, file_values={"speed": "3"}, env={})
        with pytest.raises(ConfigError, match="flags"):
            resolve(self.DEFAULTS, flag_values={"speed": 3}, env={})


class TestHelpers:
    def test_load_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 11\n")
        assert load_config_file(path) == {"seed": "11"}

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(tmp_path / "absent.cfg")

    def test_coercions(self):
        assert coerce_int("seed", "12") == 12
        assert coerce_float("dropout", "0.5") == 0.5
        with pytest.raises(ConfigError):
            coerce_int("seed", "1.5")
        with pytest.raises(ConfigError):
            coerce_float("dropout", "half")

    def test_format_resolved_sorted(self):
        text = format_resolved({"b": 2, "a": 1})
        assert text.splitlines() == ["resolved configuration:", "  a = 1", "  b = 2"]
