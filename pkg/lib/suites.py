"""
Ablation suite lookup: suite name -> ordered variants -> dotted overrides
"""

import os
import json
import logging
from pathlib import Path

from lib.errors import ConfigError

logger = logging.getLogger(__name__)

SUITES_FILE = 'ablation_suites.json'
APP_DIR = Path(__file__).resolve().parent.parent


class SuiteLookup:
    """Ablation variants as declared in ablation_suites.json"""

    def __init__(self, config_dir=None):
        """
        Args:
            config_dir: Directory searched first for the suites file.
                        Defaults to the HGRN_CONFIG_DIR env var.
        """
        if config_dir is None:
            config_dir = os.environ.get('HGRN_CONFIG_DIR')
        self.config_dir = Path(config_dir) if config_dir else None
        self.suites = self._load_json(SUITES_FILE)

    def _load_json(self, filename):
        """Load the lookup table from the config directory, the app directory or cwd"""
        candidates = []
        if self.config_dir is not None:
            candidates.append((self.config_dir / filename, 'config directory'))
        candidates.append((APP_DIR / filename, 'app directory'))
        candidates.append((Path(filename), 'current directory'))

        for filepath, label in candidates:
            if not filepath.exists():
                if label == 'config directory':
                    logger.warning(f"{filename} not found in {self.config_dir}, falling back")
                continue
            try:
                with open(filepath, 'r') as f:
                    data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {filepath}: {e}")
            logger.info(f"Loaded {filename} from {label}")
            return data
        raise ConfigError(f"lookup file not found: {filename}")

    def names(self):
        return list(self.suites)

    def variants(self, suite):
        """List of {'name', 'overrides', ...} dicts in declaration order"""
        if suite not in self.suites:
            raise ConfigError(f"unknown ablation suite '{suite}', expected one of {self.names()}")
        return self.suites[suite]['variants']

    def override_args(self, suite, variant_name):
        """Overrides of one variant in the section.key=value form the CLI takes"""
        for variant in self.variants(suite):
            if variant['name'] == variant_name:
                return [f"{key}={json.dumps(value)}" for key, value in variant['overrides'].items()]
        raise ConfigError(f"suite '{suite}' has no variant '{variant_name}'")
