"""
Checkpoint registry: named, checksummed model weights bound in a TOML file.

Example Checkpoints.toml format:

    [mse-q3]
    path = "runs/mse-q3/stage2.pt"
    sha256 = "def456..."
    quality_index = 3
    lambda = 0.013
    metric = "mse"
    description = "desk preset, 20K stage-2 steps"

        [[mse-q3.download]]
        url = "https://example.com/mse-q3.pt"
        sha256 = "def456..."

Usage:
    registry = load_registry("Checkpoints.toml")
    path = registry["mse-q3"]             # verified local file, downloaded if needed
    model, entry = registry.load_model(3)  # by quality index
"""

import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from ._compat import require_tomlkit, require_tomllib
from .utils import compute_sha256, download_file

logger = logging.getLogger(__name__)

REGISTRY_FILENAME = "Checkpoints.toml"

_cache_dir: Optional[Path] = None
_registries: Dict[str, "CheckpointRegistry"] = {}


@dataclass
class DownloadInfo:
    """A mirror for a checkpoint file."""
    url: str
    sha256: str


@dataclass
class CheckpointEntry:
    """One named checkpoint from Checkpoints.toml."""
    name: str
    path: Optional[str] = None
    sha256: str = ""
    quality_index: int = 0
    lmbda: Optional[float] = None
    metric: str = "mse"
    downloads: List[DownloadInfo] = field(default_factory=list)

    # Extra metadata fields (description, preset, steps, ...)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, name: str, data: Dict[str, Any]) -> "CheckpointEntry":
        """Create CheckpointEntry from a TOML table."""
        downloads = [
            DownloadInfo(url=dl["url"], sha256=dl.get("sha256", ""))
            for dl in data.get("download", [])
        ]
        known_fields = {"path", "sha256", "quality_index", "lambda", "metric", "download"}
        metadata = {k: v for k, v in data.items() if k not in known_fields}
        return cls(
            name=name,
            path=data.get("path"),
            sha256=data.get("sha256", ""),
            quality_index=int(data.get("quality_index", 0)),
            lmbda=data.get("lambda"),
            metric=data.get("metric", "mse"),
            downloads=downloads,
            metadata=metadata,
        )


def _verify_checksum(filepath: Path, expected_sha256: str) -> bool:
    return compute_sha256(filepath).lower() == expected_sha256.lower()


class CheckpointRegistry:
    """
    Resolves checkpoint names or quality indexes to verified local files.

    A checkpoint is used from its bound ``path`` when that file exists and
    matches its checksum; otherwise it is fetched from its mirrors, in
    order, into a content-addressed cache ``<cache_dir>/<sha256>/``.
    """

    def __init__(
        self,
        toml_path: Union[str, Path],
        cache_dir: Optional[Union[str, Path]] = None,
        verbose: bool = False,
    ):
        """
        Parameters
        ----------
        toml_path : str or Path
            Path to Checkpoints.toml
        cache_dir : str or Path, optional
            Download cache. Defaults to ~/.multiref_codec/
        verbose : bool
            Whether to show download progress
        """
        self.toml_path = Path(toml_path)
        self.verbose = verbose
        if cache_dir is not None:
            self.cache_dir = Path(cache_dir)
        else:
            self.cache_dir = get_cache_dir()

        self.entries: Dict[str, CheckpointEntry] = {}
        self._load_toml()

    def _load_toml(self):
        tomllib = require_tomllib()
        if not self.toml_path.exists():
            raise FileNotFoundError(f"{REGISTRY_FILENAME} not found: {self.toml_path}")
        with open(self.toml_path, "rb") as f:
            data = tomllib.load(f)
        for name, entry_data in data.items():
            self.entries[name] = CheckpointEntry.from_dict(name, entry_data)

    def __getitem__(self, key: Union[str, int]) -> Path:
        return self.get_path(key)

    def __contains__(self, key: Union[str, int]) -> bool:
        try:
            self.entry(key)
        except KeyError:
            return False
        return True

    def names(self) -> List[str]:
        return sorted(self.entries, key=lambda n: (self.entries[n].quality_index, n))

    def entry(self, key: Union[str, int]) -> CheckpointEntry:
        """
        Look up a checkpoint by name or quality index.

        Raises
        ------
        KeyError
            If nothing is bound under ``key``
        """
        if isinstance(key, int):
            for entry in self.entries.values():
                if entry.quality_index == key:
                    return entry
        elif key in self.entries:
            return self.entries[key]
        raise KeyError(
            f"Checkpoint '{key}' not found in {self.toml_path}. "
            f"Available: {self.names()}"
        )

    def _local_path(self, entry: CheckpointEntry) -> Optional[Path]:
        if entry.path is None:
            return None
        path = Path(entry.path)
        return path if path.is_absolute() else self.toml_path.parent / path

    def _cached_path(self, entry: CheckpointEntry) -> Path:
        return self.cache_dir / entry.sha256 / f"{entry.name}.pt"

    def get_path(self, key: Union[str, int], download: bool = True) -> Path:
        """
        Path to a verified checkpoint file.

        Raises
        ------
        KeyError
            If the checkpoint is not bound
        RuntimeError
            If the file is missing and cannot be downloaded, or fails its
            checksum
        """
        entry = self.entry(key)
        local = self._local_path(entry)
        if local is not None and local.exists():
            if entry.sha256 and not _verify_checksum(local, entry.sha256):
                raise RuntimeError(f"Checksum verification failed for {local}")
            return local

        cached = self._cached_path(entry)
        if entry.sha256 and cached.exists() and _verify_checksum(cached, entry.sha256):
            return cached

        if not download or not entry.downloads:
            raise RuntimeError(
                f"Checkpoint '{entry.name}' is not available locally"
                + ("" if download else " and download=False")
            )
        return self._download(entry, cached)

    def _download(self, entry: CheckpointEntry, destination: Path) -> Path:
        last_error = None
        for dl in entry.downloads:
            try:
                return self._download_one(entry, dl, destination)
            except Exception as e:
                last_error = e
                logger.warning("Download of '%s' failed from %s: %s", entry.name, dl.url, e)
        raise RuntimeError(
            f"Failed to download checkpoint '{entry.name}' from all sources. "
            f"Last error: {last_error}"
        )

    def _download_one(self, entry: CheckpointEntry, dl: DownloadInfo, destination: Path) -> Path:
        logger.info("Downloading checkpoint '%s' from %s", entry.name, dl.url)
        with tempfile.NamedTemporaryFile(suffix=".pt", delete=False) as tmp:
            tmp_path = Path(tmp.name)
        try:
            download_file(dl.url, tmp_path, verbose=self.verbose)
            expected = dl.sha256 or entry.sha256
            if expected and not _verify_checksum(tmp_path, expected):
                raise RuntimeError(f"Checksum verification failed for {dl.url}")
            destination.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(tmp_path), destination)
            return destination
        finally:
            if tmp_path.exists():
                tmp_path.unlink()

    def load_model(self, key: Union[str, int], config=None, map_location="cpu"):
        """Load the codec bound under ``key``; see ``train.load_checkpoint``."""
        from .train import load_checkpoint

        entry = self.entry(key)
        model, _ = load_checkpoint(self.get_path(key), config=config, map_location=map_location)
        return model, entry

    def exists(self, key: Union[str, int]) -> bool:
        """Whether the checkpoint is available without downloading."""
        try:
            self.get_path(key, download=False)
        except (KeyError, RuntimeError):
            return False
        return True

    def clear(self, key: Optional[Union[str, int]] = None):
        """Remove downloaded copies from the cache (bound local files are kept)."""
        entries = [self.entry(key)] if key is not None else list(self.entries.values())
        for entry in entries:
            cached = self._cached_path(entry).parent
            if entry.sha256 and cached.exists():
                shutil.rmtree(cached)
                logger.info("Cleared cached checkpoint '%s'", entry.name)


def get_cache_dir() -> Path:
    """Get the global checkpoint cache directory."""
    if _cache_dir is None:
        return Path.home() / ".multiref_codec"
    return _cache_dir


def set_cache_dir(path: Union[str, Path]):
    """Set the global checkpoint cache directory."""
    global _cache_dir
    _cache_dir = Path(path)
    _cache_dir.mkdir(parents=True, exist_ok=True)


def find_registry(search_path: Optional[Union[str, Path]] = None) -> Optional[Path]:
    """The given path if it exists, else Checkpoints.toml in the working directory."""
    candidates = [Path(search_path) if search_path else None, Path.cwd() / REGISTRY_FILENAME]
    for candidate in candidates:
        if candidate and candidate.exists():
            return candidate
    return None


def load_registry(
    toml_path: Optional[Union[str, Path]] = None,
    cache_dir: Optional[Union[str, Path]] = None,
    verbose: bool = False,
) -> CheckpointRegistry:
    """
    Load (and memoize) the registry at ``toml_path``.

    Raises
    ------
    FileNotFoundError
        If no registry file can be found
    """
    if toml_path is None:
        toml_path = find_registry()
        if toml_path is None:
            raise FileNotFoundError(
                f"Could not find {REGISTRY_FILENAME}. Provide the path explicitly."
            )
    key = str(Path(toml_path).resolve())
    if key not in _registries:
        _registries[key] = CheckpointRegistry(toml_path, cache_dir=cache_dir, verbose=verbose)
    return _registries[key]


def _load_document(toml_path: Path):
    tomlkit = require_tomlkit()
    if toml_path.exists():
        with open(toml_path, "r") as f:
            return tomlkit.load(f)
    return tomlkit.document()


def _write_document(toml_path: Path, doc):
    tomlkit = require_tomlkit()
    toml_path.parent.mkdir(parents=True, exist_ok=True)
    with open(toml_path, "w") as f:
        f.write(tomlkit.dumps(doc))
    _registries.pop(str(toml_path.resolve()), None)


def bind_checkpoint(
    toml_path: Union[str, Path],
    name: str,
    checkpoint_path: Union[str, Path],
    quality_index: int,
    lmbda: float,
    metric: str = "mse",
    download_url: Optional[str] = None,
    force: bool = False,
    **metadata: Any,
) -> str:
    """
    Bind a checkpoint file under ``name``.

    The path is stored relative to the TOML file when possible.

    Returns
    -------
    str
        SHA256 of the checkpoint file

    Raises
    ------
    ValueError
        If ``name`` is already bound and ``force`` is False
    """
    tomlkit = require_tomlkit()
    toml_path = Path(toml_path)
    checkpoint_path = Path(checkpoint_path)
    doc = _load_document(toml_path)
    if name in doc and not force:
        raise ValueError(
            f"Checkpoint '{name}' already exists in {toml_path}. Use force=True to overwrite."
        )

    sha256 = compute_sha256(checkpoint_path)
    try:
        stored = checkpoint_path.resolve().relative_to(toml_path.parent.resolve())
    except ValueError:
        stored = checkpoint_path.resolve()

    table = tomlkit.table()
    table.add("path", stored.as_posix())
    table.add("sha256", sha256)
    table.add("quality_index", quality_index)
    table.add("lambda", lmbda)
    table.add("metric", metric)
    for key, value in metadata.items():
        table.add(key, value)
    if download_url is not None:
        downloads = tomlkit.aot()
        item = tomlkit.table()
        item.add("url", download_url)
        item.add("sha256", sha256)
        downloads.append(item)
        table.add("download", downloads)

    doc[name] = table
    _write_document(toml_path, doc)
    logger.info("Bound checkpoint '%s' -> %s", name, stored)
    return sha256


def unbind_checkpoint(toml_path: Union[str, Path], name: str) -> bool:
    """Remove a binding; returns False if it was not there."""
    toml_path = Path(toml_path)
    if not toml_path.exists():
        return False
    doc = _load_document(toml_path)
    if name not in doc:
        return False
    del doc[name]
    _write_document(toml_path, doc)
    return True


def add_download_source(toml_path: Union[str, Path], name: str, download_url: str, sha256: str):
    """
    Add a mirror to an existing binding.

    Raises
    ------
    FileNotFoundError
        If the registry file does not exist
    KeyError
        If ``name`` is not bound
    """
    tomlkit = require_tomlkit()
    toml_path = Path(toml_path)
    if not toml_path.exists():
        raise FileNotFoundError(f"{REGISTRY_FILENAME} not found: {toml_path}")
    doc = _load_document(toml_path)
    if name not in doc:
        raise KeyError(f"Checkpoint '{name}' not found in {toml_path}")
    item = tomlkit.table()
    item.add("url", download_url)
    item.add("sha256", sha256)
    if "download" not in doc[name]:
        doc[name].add("download", tomlkit.aot())
    doc[name]["download"].append(item)
    _write_document(toml_path, doc)


def checkpoint_name(metric: str, quality_index: int) -> str:
    return f"{metric}-q{quality_index}"


def resolve_model(
    key: Union[str, int, Path],
    registry: Optional[Union[str, Path]] = None,
    map_location="cpu",
) -> Tuple[Any, int]:
    """
    Load a codec from a checkpoint file path or a registry key.

    Returns
    -------
    tuple
        ``(model, quality_index)``
    """
    from .train import load_checkpoint

    path = Path(str(key))
    if path.suffix == ".pt" and path.exists():
        model, _ = load_checkpoint(path, map_location=map_location)
        return model, 0
    if isinstance(key, str) and key.isdigit():
        key = int(key)
    model, entry = load_registry(registry).load_model(key, map_location=map_location)
    return model, entry.quality_index
