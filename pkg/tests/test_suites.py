import json

import pytest

from lib.config import Config
from lib.errors import ConfigError
from lib.suites import SuiteLookup


@pytest.fixture
def lookup(monkeypatch):
    monkeypatch.delenv('HGRN_CONFIG_DIR', raising=False)
    return SuiteLookup()


class TestSuiteLookup:
    def test_shipped_suites(self, lookup):
        assert lookup.names() == ['lower_bound', 'gates', 'complex']
        names = [v['name'] for v in lookup.variants('lower_bound')]
        assert names == ['monotone', 'none', 'random', 'decreasing', 'only']

    def test_override_args_build_valid_configs(self, lookup):
        for suite in lookup.names():
            for variant in lookup.variants(suite):
                config = Config(overrides=lookup.override_args(suite, variant['name']))
                for key, value in variant['overrides'].items():
                    assert config.get(key) == value

    def test_override_arg_format(self, lookup):
        assert lookup.override_args('gates', 'no_output_gate') == ['model.use_output_gate=false']
        assert lookup.override_args('gates', 'full') == []

    def test_unknown(self, lookup):
        with pytest.raises(ConfigError):
            lookup.variants('attention')
        with pytest.raises(ConfigError):
            lookup.override_args('gates', 'no_gates')

    def test_config_dir_takes_precedence(self, tmp_path):
        suites = {'tiny': {'variants': [{'name': 'a', 'overrides': {'model.layers': 1}}]}}
        (tmp_path / 'ablation_suites.json').write_text(json.dumps(suites))
        lookup = SuiteLookup(config_dir=tmp_path)
        assert lookup.names() == ['tiny']
        assert lookup.override_args('tiny', 'a') == ['model.layers=1']

    def test_falls_back_to_app_dir(self, tmp_path):
        assert 'complex' in SuiteLookup(config_dir=tmp_path).names()

    def test_invalid_json(self, tmp_path):
        (tmp_path / 'ablation_suites.json').write_text('{')
        with pytest.raises(ConfigError):
            SuiteLookup(config_dir=tmp_path)
