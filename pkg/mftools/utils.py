from pathlib import Path
import glob
import logging
import os
import tempfile
import zlib

import numpy as np
import yaml

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    """External data does not satisfy a documented contract
    (off-level guidance map, dataset that fails re-derivation)."""


class DocumentError(ValueError):
    """Malformed YAML document (scene, catalog, config). `line` is 1-based."""

    def __init__(self, msg, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + msg)


class LineLoader(yaml.SafeLoader):
    """SafeLoader that records the 1-based line of every mapping
    under the key `__line__`."""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping["__line__"] = node.start_mark.line + 1
        return mapping


def load_yaml(fn, with_lines=False):
    """Load a YAML document. Syntax errors are re-raised as `DocumentError`
    with the line number reported by the parser."""
    fn = Path(fn)
    loader = LineLoader if with_lines else yaml.SafeLoader
    try:
        with open(fn, "r") as f:
            return yaml.load(f, Loader=loader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise DocumentError(str(e.problem), path=fn, line=line) from e


def strip_lines(obj):
    """Remove `__line__` bookkeeping added by `LineLoader`."""
    if isinstance(obj, dict):
        return {k: strip_lines(v) for k, v in obj.items() if k != "__line__"}
    if isinstance(obj, list):
        return [strip_lines(v) for v in obj]
    return obj


def dump_yaml(obj) -> bytes:
    return yaml.safe_dump(obj, sort_keys=False, default_flow_style=False).encode()


def atomic_write_bytes(fn, data: bytes):
    """Write `data` to a temporary file next to `fn` and rename it into place."""
    fn = Path(fn)
    fn.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{fn.name}.", suffix=".tmp", dir=fn.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, fn)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def derive_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, name, *keys).

    The stream for a key never depends on how many other keys were drawn
    before it, so work can be distributed over threads in any order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    entropy.extend(int(k) for k in keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def find_files(args, pattern="*.png", match=None):
    """Parse list of filenames and directories and resolve them to files.

    pattern:
        Glob used to locate files inside directories (recursive)
    match:
        Keep only files whose parent directory matches this glob-style pattern
        example:
            match="pairs/*"
    """
    if not args:
        fns = [Path(".")]
    else:
        fns = [Path(fn) for fn in args]

    new_fns = []
    for fn in fns:
        if fn.is_dir():
            new_fns.extend(sorted(fn.rglob(pattern)))
        elif any(c in str(fn) for c in "*?["):
            new_fns.extend(sorted(Path(p) for p in glob.glob(str(fn), recursive=True)))
        else:
            new_fns.append(fn)

    if match:
        new_fns = [fn for fn in new_fns if fn.parent.match(match)]

    logger.info("%d files matching %s (subdir: %s) found.", len(new_fns), pattern, match)

    return new_fns


def setup_logging(verbose: int = 0):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("mftools").setLevel(level)
