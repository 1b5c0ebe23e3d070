"""CLI tests using Typer's CliRunner."""

import json
import re
from pathlib import Path

import pytest
from typer.testing import CliRunner

from flowmesh import __version__
from flowmesh.cli import app
from flowmesh.exceptions import ControllerRefused, TransportError
from flowmesh.network.identity import generate_key, key_id


def _strip_ansi(text: str) -> str:
    """Remove ANSI escape sequences from text."""
    return re.sub(r"\x1b\[[0-9;]*m", "", text)


runner = CliRunner()

NODE_INFO = {
    "nodeId": "a1" * 6,
    "displayName": "desk",
    "isRelay": False,
    "address": ["127.0.0.1", 21000],
    "seq": 4,
    "links": [],
    "routes": {"b2" * 6: "b2" * 6},
    "announcements": [
        {"nodeId": "b2" * 6, "displayName": "relay", "isRelay": True, "seq": 2}
    ],
    "groups": [],
}


@pytest.fixture
def daemon(mocker):
    """Replace the daemon connection; set ``return_value`` or ``side_effect``."""
    return mocker.patch("flowmesh.cli.call_daemon")


class TestVersionCommand:
    """Tests for version display."""

    def test_version_flag(self):
        """Test --version flag displays version."""
        result = runner.invoke(app, ["--version"])

        assert result.exit_code == 0
        assert __version__ in result.stdout

    def test_version_short_flag(self):
        """Test -V flag displays version."""
        result = runner.invoke(app, ["-V"])

        assert result.exit_code == 0
        assert __version__ in result.stdout


class TestConfigCommand:
    """Tests for config subcommand."""

    def test_config_path(self, temp_home: Path):
        """Test config --path shows the profile's config file."""
        result = runner.invoke(app, ["config", "--path"])

        assert result.exit_code == 0
        assert "config.toml" in result.stdout

    def test_config_show_defaults(self, temp_home: Path):
        """Test config --show lists the default settings."""
        result = runner.invoke(app, ["config", "--show"])
        output = _strip_ansi(result.stdout)

        assert result.exit_code == 0
        assert "listen_port" in output
        assert "max_parallel_firings" in output
        assert "Configuration" in output

    def test_config_show_json(self, temp_home: Path):
        """Test config --show --json prints the sections as JSON."""
        result = runner.invoke(app, ["--json", "config", "--show"])

        assert result.exit_code == 0
        data = json.loads(result.stdout)
        assert data["network"]["listen_port"] == 21000
        assert data["node"]["display_name"] == "default"

    def test_config_init_creates_file(self, temp_home: Path):
        """Test config --init creates the file in the active profile."""
        config_file = temp_home / "lab" / "config.toml"

        result = runner.invoke(app, ["--profile", "lab", "config", "--init"])

        assert result.exit_code == 0
        assert "Created config file" in result.stdout
        assert config_file.exists()

    def test_config_init_fails_if_exists(self, temp_home: Path):
        """Test config --init refuses to overwrite."""
        (temp_home / "default").mkdir()
        (temp_home / "default" / "config.toml").write_text("[node]\n")

        result = runner.invoke(app, ["config", "--init"])

        assert result.exit_code == 1
        assert "already exists" in result.stdout

    def test_config_no_option_shows_usage(self, temp_home: Path):
        """Test config without options shows a usage hint."""
        result = runner.invoke(app, ["config"])

        assert result.exit_code == 0
        assert "--show" in _strip_ansi(result.stdout)


class TestToolCommands:
    """Tests for tool add and tool list."""

    def test_add_and_list(self, temp_home: Path, tool_bundle):
        """Test installing a fixture bundle and listing it."""
        added = runner.invoke(app, ["tool", "add", str(tool_bundle("echo"))])
        listed = runner.invoke(app, ["--json", "tool", "list"])

        assert added.exit_code == 0
        assert "Installed" in added.stdout
        assert listed.exit_code == 0
        assert [m["toolId"] for m in json.loads(listed.stdout)] == ["echo"]

    def test_add_to_channel(self, temp_home: Path, tool_bundle):
        """Test installing into the development channel."""
        result = runner.invoke(
            app,
            [
                "--json",
                "tool",
                "add",
                str(tool_bundle("adder")),
                "--channel",
                "development",
            ],
        )

        assert result.exit_code == 0
        assert json.loads(result.stdout)["channel"] == "development"

    def test_add_missing_manifest(self, temp_home: Path, tmp_path: Path):
        """Test that a missing path is a user error."""
        result = runner.invoke(app, ["tool", "add", str(tmp_path / "nope.json")])

        assert result.exit_code == 1
        assert "File not found" in result.output

    def test_add_needs_source(self, temp_home: Path):
        """Test that tool add without a path or --wizard fails."""
        result = runner.invoke(app, ["tool", "add"])

        assert result.exit_code == 1


class TestGroupCommands:
    """Tests for access group key management."""

    def test_new_writes_key(self, temp_home: Path, tmp_path: Path, daemon):
        """Test that group new stores a key and writes it for sharing."""
        daemon.side_effect = TransportError("no daemon")
        out = tmp_path / "aero.key"

        result = runner.invoke(app, ["--json", "group", "new", "aero", "-o", str(out)])

        key = bytes.fromhex(out.read_text().strip())
        assert result.exit_code == 0
        assert json.loads(result.stdout) == {"name": "aero", "keyId": key_id(key)}

    def test_add_and_list(self, temp_home: Path, tmp_path: Path, daemon):
        """Test importing a hex key file and listing the group."""
        key = generate_key()
        keyfile = tmp_path / "aero.key"
        keyfile.write_text(key.hex())

        added = runner.invoke(app, ["group", "add", "aero", str(keyfile)])
        listed = runner.invoke(app, ["--json", "group", "list"])

        assert added.exit_code == 0
        assert json.loads(listed.stdout) == [{"name": "aero", "keyId": key_id(key)}]
        assert daemon.call_args.args[1] == "reload_groups"

    def test_add_rejects_bad_key(self, temp_home: Path, tmp_path: Path, daemon):
        """Test that a key file that is neither hex nor raw bytes fails."""
        keyfile = tmp_path / "bad.key"
        keyfile.write_text("not a key")

        result = runner.invoke(app, ["group", "add", "aero", str(keyfile)])

        assert result.exit_code == 1
        daemon.assert_not_called()

    def test_public_is_reserved(self, temp_home: Path, tmp_path: Path, daemon):
        """Test that the public group cannot be given a key."""
        result = runner.invoke(
            app, ["group", "new", "public", "-o", str(tmp_path / "k")]
        )

        assert result.exit_code == 1


class TestDaemonCommands:
    """Tests for commands that talk to a running daemon."""

    def test_net_info(self, temp_home: Path, daemon):
        """Test that net info renders the known nodes."""
        daemon.return_value = NODE_INFO

        result = runner.invoke(app, ["net", "info"])
        output = _strip_ansi(result.stdout)

        assert result.exit_code == 0
        assert "desk" in output
        assert "relay" in output
        assert daemon.call_args.args[1] == "node_info"

    def test_transport_failure_exit_code(self, temp_home: Path, daemon):
        """Test that an unreachable daemon exits with code 2."""
        daemon.side_effect = TransportError("no daemon at 127.0.0.1:21000")

        result = runner.invoke(app, ["net", "info"])

        assert result.exit_code == 2
        assert "no daemon" in result.output

    def test_net_connect_parses_address(self, temp_home: Path, daemon):
        """Test that net connect sends host and port."""
        daemon.return_value = {"nodeId": "b2" * 6, "displayName": "relay"}

        result = runner.invoke(app, ["net", "connect", "10.0.0.2:21001"])

        assert result.exit_code == 0
        assert daemon.call_args.args[1:] == (
            "net_connect",
            {"host": "10.0.0.2", "port": 21001},
        )

    def test_net_connect_bad_address(self, temp_home: Path, daemon):
        """Test that an address without a port is rejected."""
        result = runner.invoke(app, ["net", "connect", "relay.local"])

        assert result.exit_code == 1
        daemon.assert_not_called()

    def test_components_json(self, temp_home: Path, daemon):
        """Test that components list passes filters and prints JSON."""
        component = {
            "toolId": "echo",
            "channel": "stable",
            "hostNode": "b2" * 6,
            "group": "public",
        }
        daemon.return_value = {"components": [component]}

        result = runner.invoke(
            app, ["--json", "components", "list", "--tool", "echo"]
        )

        assert result.exit_code == 0
        assert json.loads(result.stdout) == [component]
        assert daemon.call_args.args[2] == {"toolId": "echo", "host": None}

    def test_publish_to_group(self, temp_home: Path, daemon):
        """Test that publish forwards the channel and group."""
        daemon.return_value = {"toolId": "echo", "group": "aero"}

        result = runner.invoke(
            app, ["publish", "echo", "development", "--group", "aero"]
        )

        assert result.exit_code == 0
        assert daemon.call_args.args[2] == {
            "toolId": "echo",
            "channel": "development",
            "group": "aero",
        }

    def test_run_cancel_with_controller(self, temp_home: Path, daemon):
        """Test that cancel names the controller to forward to."""
        daemon.return_value = {"runId": "r1", "status": "Cancelled"}

        result = runner.invoke(app, ["run", "cancel", "r1", "--controller", "c" * 32])

        assert result.exit_code == 0
        assert "Cancelled" in result.stdout
        assert daemon.call_args.args[1:] == (
            "cancel_run",
            {"runId": "r1", "controller": "c" * 32},
        )


class TestRunSubmit:
    """Tests for run submit."""

    def test_missing_workflow(self, temp_home: Path, tmp_path: Path):
        """Test that a missing workflow file is a user error."""
        result = runner.invoke(app, ["run", "submit", str(tmp_path / "none.wf")])

        assert result.exit_code == 1

    def test_submit_imports_files(self, temp_home: Path, fixtures_dir: Path, mocker):
        """Test that local files are imported and the workflow sent as text."""
        submit = mocker.patch(
            "flowmesh.cli.submit_and_watch",
            return_value={"runId": "r1", "controller": "c" * 32},
        )

        result = runner.invoke(
            app,
            [
                "--json",
                "run",
                "submit",
                str(fixtures_dir / "workflows" / "wing.wf"),
                "--controller",
                "c" * 32,
            ],
        )

        assert result.exit_code == 0
        assert json.loads(result.stdout)["runId"] == "r1"
        params = submit.call_args.args[1]
        assert params["controller"] == "c" * 32
        assert '"hash"' in params["workflow"]
        stored = (temp_home / "default" / "store" / "blobs").rglob("*")
        assert any(path.is_file() for path in stored)

    def test_failed_run_exit_code(self, temp_home: Path, fixtures_dir, mocker):
        """Test that waiting on a run that fails exits with code 1."""
        mocker.patch(
            "flowmesh.cli.submit_and_watch",
            return_value={"runId": "r1", "run": {"status": "Failed"}},
        )

        result = runner.invoke(
            app,
            ["run", "submit", str(fixtures_dir / "workflows" / "wing.wf"), "--wait"],
        )

        assert result.exit_code == 1
        assert "Failed" in result.stdout

    def test_refused_prints_violations(self, temp_home: Path, fixtures_dir, mocker):
        """Test that a refused workflow lists the controller's violations."""
        violations = [
            {"kind": "UnknownTool", "path": "lift", "message": "no host for lift"}
        ]
        mocker.patch(
            "flowmesh.cli.submit_and_watch",
            side_effect=ControllerRefused("refused", {"violations": violations}),
        )

        result = runner.invoke(
            app, ["run", "submit", str(fixtures_dir / "workflows" / "wing.wf")]
        )

        assert result.exit_code == 1
        assert "no host for lift" in _strip_ansi(result.output)


class TestHelpText:
    """Tests for help text display."""

    def test_main_help(self):
        """Test main help text."""
        result = runner.invoke(app, ["--help"])
        output = _strip_ansi(result.stdout)

        assert result.exit_code == 0
        assert "Distributed workflow integration engine" in output
        for command in ("daemon", "tool", "group", "net", "components", "run"):
            assert command in output

    def test_run_help(self):
        """Test run subcommand help."""
        result = runner.invoke(app, ["run", "--help"])
        output = _strip_ansi(result.stdout)

        assert result.exit_code == 0
        for command in ("submit", "status", "records", "list", "cancel", "export"):
            assert command in output

    def test_submit_help(self):
        """Test run submit help lists its options."""
        result = runner.invoke(app, ["run", "submit", "--help"])
        output = _strip_ansi(result.stdout)

        assert result.exit_code == 0
        assert "--controller" in output
        assert "--wait" in output
