"""Line-oriented `key = value` config files with `#` comments."""


class ConfigError(ValueError):
    """Config file problem, carrying the offending line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def read_kv_pairs(path):
    """Parse a config file into [(lineno, key, value), ...], order preserved.

    Blank lines and `#` comments are ignored; keys may repeat.
    """
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(path, lineno, "empty key")
            pairs.append((lineno, key, value))
    return pairs
