"""Shared test fixtures for flowmesh tests."""

import sys
from pathlib import Path
from typing import Callable

import pytest

from flowmesh.config import Profile
from flowmesh.core.blobs import BlobStore
from flowmesh.core.engine import WorkflowEngine
from flowmesh.core.journal import RunStore
from flowmesh.core.manifests import ToolRegistry
from flowmesh.core.tool_runner import ToolRunner
from flowmesh.core.validation import Catalog
from flowmesh.network.catalog import publication_for
from flowmesh.testkit import FIXTURES_DIR

LOCAL_NODE = "0" * 32


@pytest.fixture
def fixtures_dir() -> Path:
    """Bundled fixture tools and workflows."""
    return FIXTURES_DIR


@pytest.fixture
def tool_bundle(fixtures_dir: Path) -> Callable[[str], Path]:
    """Path of a fixture tool bundle by name."""
    return lambda name: fixtures_dir / "tools" / name


@pytest.fixture
def blobs(tmp_path: Path) -> BlobStore:
    return BlobStore(tmp_path / "blobs")


@pytest.fixture
def run_store(tmp_path: Path, blobs: BlobStore) -> RunStore:
    return RunStore(tmp_path / "store", blobs)


@pytest.fixture
def tool_runner(tmp_path: Path, blobs: BlobStore) -> ToolRunner:
    """Runner using the test interpreter and a short cancel grace."""
    return ToolRunner(tmp_path / "work", blobs, [sys.executable], cancel_grace=1.0)


@pytest.fixture
def registry(tmp_path: Path, tool_bundle) -> ToolRegistry:
    """Registry with every fixture tool installed on the stable channel."""
    registry = ToolRegistry(tmp_path / "tools")
    for name in ("adder", "echo", "failer", "quadratic-lift", "sleeper"):
        registry.install(tool_bundle(name))
    return registry


@pytest.fixture
def local_catalog(registry: ToolRegistry) -> Catalog:
    """Catalog listing the installed fixture tools as local publications."""
    records = [
        publication_for(m, LOCAL_NODE, "public") for m in registry.list_manifests()
    ]
    return Catalog(publications=records, local_node=LOCAL_NODE)


@pytest.fixture
def make_engine(run_store, blobs, tool_runner, registry, local_catalog):
    """Factory for a single-node engine over the fixture registry."""

    def factory(**options) -> WorkflowEngine:
        return WorkflowEngine(
            LOCAL_NODE,
            run_store,
            blobs,
            tool_runner,
            catalog=lambda: local_catalog,
            registry=registry,
            cancel_grace=1.0,
            **options,
        )

    return factory


@pytest.fixture
def temp_home(tmp_path: Path, monkeypatch) -> Path:
    """Point ``$FLOWMESH_HOME`` at a temporary directory."""
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("FLOWMESH_HOME", str(home))
    monkeypatch.delenv("FLOWMESH_PROFILE", raising=False)
    return home


@pytest.fixture
def profile(temp_home: Path) -> Profile:
    return Profile.resolve(name="test").ensure()
