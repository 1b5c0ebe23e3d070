"""Unit tests for the dataflow engine on a single node."""

import asyncio
import json
import multiprocessing
import os
import random
import time

import psutil
import pytest

from flowmesh.core.engine import ComponentState, is_ready
from flowmesh.core.journal import RunStore
from flowmesh.core.workflow_io import parse_workflow
from flowmesh.exceptions import UnknownRun, ValidationFailed
from flowmesh.models.records import DataToken, RunStatus
from flowmesh.models.values import DataType, DataValue, utc_now
from flowmesh.models.workflow import (
    ComponentInstance,
    ComponentKind,
    InputMode,
    PortSpec,
)

DOUBLE = """\
import json
x = json.load(open('inputs.json'))['x']['value']
json.dump({'y': 2 * x}, open('outputs.json', 'w'))
"""

TOWARDS_TWO = """\
import json
x = json.load(open('inputs.json'))['x']['value']
json.dump({'y': x / 2 + 1}, open('outputs.json', 'w'))
"""

SCALE = """\
import json
inputs = json.load(open('inputs.json'))
y = inputs['x']['value'] * inputs['factor']['value']
json.dump({'y': y}, open('outputs.json', 'w'))
"""


def workflow(components, connections=()):
    return parse_workflow(
        json.dumps(
            {
                "name": "engine-test",
                "components": list(components),
                "connections": [{"from": a, "to": b} for a, b in connections],
            }
        )
    )


def source(component_id, **config):
    return {
        "id": component_id,
        "kind": "builtin",
        "builtin": "value_source",
        "config": config,
    }


def script(component_id, text, inputs=(("x", "consumed"),), outputs=("y",)):
    ports = [
        {"name": name, "type": "float", "direction": "input", "mode": mode}
        for name, mode in inputs
    ]
    ports += [{"name": n, "type": "float", "direction": "output"} for n in outputs]
    return {
        "id": component_id,
        "kind": "builtin",
        "builtin": "script",
        "config": {"script": text},
        "ports": ports,
    }


def tool(component_id, tool_id, ports):
    return {"id": component_id, "kind": "tool", "tool": tool_id, "ports": ports}


def sweep(component_id, start, stop, steps):
    return {
        "id": component_id,
        "kind": "builtin",
        "builtin": "sweep",
        "config": {"from": start, "to": stop, "steps": steps},
    }


ADDER_PORTS = [
    {"name": "a", "type": "float", "direction": "input"},
    {"name": "b", "type": "float", "direction": "input"},
    {"name": "sum", "type": "float", "direction": "output"},
]


def outputs_of(run_store, run_id, component_id, port):
    return [
        token.value.value
        for record in run_store.get_component_runs(run_id, component_id)
        for token in record.outputs.get(port, ())
    ]


def execute(make_engine, wf, **options):
    """Run ``wf`` to completion; returns (record, events)."""
    events = []

    async def scenario():
        engine = make_engine(**options)
        engine.add_listener(events.append)
        return await engine.run(wf)

    return asyncio.run(scenario()), events


def sleeper_processes():
    """Live sleeper tool processes started from this test process."""
    found = []
    for proc in psutil.Process().children(recursive=True):
        try:
            if proc.status() == psutil.STATUS_ZOMBIE:
                continue
            if any("sleeper.py" in part for part in proc.cmdline()):
                found.append(proc.pid)
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            continue
    return found


def random_workflow(seed, max_components=12):
    """Random acyclic workflow of sources, switches and mergers.

    Returns the definition and the ids of components downstream of a merger,
    whose output order depends on arrival timing.
    """
    rng = random.Random(seed)
    components, connections, feeds = [], [], []
    for i in range(rng.randint(1, 3)):
        if rng.random() < 0.5:
            components.append(source(f"s{i}", x=round(rng.uniform(-2.0, 2.0), 2)))
            feeds.append(f"s{i}.x")
        else:
            steps = rng.randint(1, 4)
            components.append(sweep(f"s{i}", -1.0, 1.0, steps))
            feeds.append(f"s{i}.value")
    after_merger = set()
    upstream = {}
    for i in range(rng.randint(1, max_components - len(components))):
        cid = f"c{i:02d}"
        if rng.random() < 0.5:
            operator = rng.choice([">", "<=", ">="])
            threshold = round(rng.uniform(-1.0, 1.0), 1)
            components.append(
                {
                    "id": cid,
                    "kind": "builtin",
                    "builtin": "switch",
                    "config": {"operator": operator, "threshold": threshold},
                }
            )
            wired = [(rng.choice(feeds), f"{cid}.value")]
            outputs = [f"{cid}.true", f"{cid}.false"]
        else:
            count = rng.randint(1, 3)
            components.append(
                {
                    "id": cid,
                    "kind": "builtin",
                    "builtin": "merger",
                    "config": {"type": "float", "inputs": count},
                }
            )
            ports = rng.sample(range(1, count + 1), rng.randint(1, count))
            wired = [(rng.choice(feeds), f"{cid}.in{k}") for k in ports]
            outputs = [f"{cid}.out"]
            after_merger.add(cid)
        connections.extend(wired)
        upstream[cid] = {a.split(".")[0] for a, _ in wired}
        if upstream[cid] & after_merger:
            after_merger.add(cid)
        feeds.extend(outputs)
    return workflow(components, connections), after_merger


def firing_multiset(run_store, run_id):
    """Firings as (component, inputs, outputs) values, ignoring order."""
    return sorted(
        (
            r.component_id,
            tuple(sorted((p, t.value.value) for p, t in r.inputs.items())),
            tuple(
                sorted(
                    (p, tuple(t.value.value for t in ts))
                    for p, ts in r.outputs.items()
                )
            ),
        )
        for r in run_store.get_component_runs(run_id)
    )


def port_sequences(run_store, run_id, skip):
    sequences = {}
    for r in run_store.get_component_runs(run_id):
        if r.component_id in skip:
            continue
        for port, tokens in r.outputs.items():
            sequences.setdefault((r.component_id, port), []).extend(
                t.value.value for t in tokens
            )
    return sequences


class TestIsReady:
    """Tests for the firing rule."""

    @staticmethod
    def state(*ports):
        component = ComponentInstance(
            id="c", kind=ComponentKind.BUILTIN, builtin="script", ports=ports
        )
        return ComponentState(component)

    @staticmethod
    def token(x=1.0):
        return DataToken(DataValue.float_(x), "src", "out", 0, utc_now())

    def test_needs_every_required_consumed(self):
        """Test that one queued required input is not enough."""
        state = self.state(
            PortSpec.input("a", DataType.FLOAT), PortSpec.input("b", DataType.FLOAT)
        )
        state.queues["a"].append((1, self.token()))

        assert not is_ready(state)

        state.queues["b"].append((2, self.token()))
        assert is_ready(state)

    def test_constant_must_be_present(self):
        """Test that a required constant blocks until it arrives once."""
        state = self.state(
            PortSpec.input("x", DataType.FLOAT),
            PortSpec.input("k", DataType.FLOAT, InputMode.CONSTANT),
        )
        state.queues["x"].append((1, self.token()))

        assert not is_ready(state)

        state.constants["k"] = self.token(2.0)
        assert is_ready(state)

    def test_optional_consumed_trigger(self):
        """Test that optional inputs fire on any arrival."""
        state = self.state(
            PortSpec.input("a", DataType.FLOAT, required=False),
            PortSpec.input("b", DataType.FLOAT, required=False),
        )

        assert not is_ready(state)

        state.queues["b"].append((1, self.token()))
        assert is_ready(state)

    def test_source_fires_once(self):
        """Test that a pending source is ready exactly until it fired."""
        state = self.state(PortSpec.output("y", DataType.FLOAT))
        state.source_pending = True

        assert is_ready(state)

        state.source_pending = False
        state.firing_count = 1
        assert not is_ready(state)


class TestRuns:
    """Tests for complete local runs."""

    def test_tool_run(self, make_engine, run_store):
        """Test a value source feeding a local tool."""
        wf = workflow(
            [source("numbers", a=1.5, b=2.0), tool("add", "adder", ADDER_PORTS)],
            [("numbers.a", "add.a"), ("numbers.b", "add.b")],
        )

        record, _ = execute(make_engine, wf)

        assert record.status is RunStatus.FINISHED
        assert outputs_of(run_store, record.run_id, "add", "sum") == [3.5]

    def test_sweep_fires_per_token(self, make_engine, run_store):
        """Test that every swept value drives one firing, in order."""
        wf = workflow(
            [sweep("grid", 0, 1, 3), script("double", DOUBLE)],
            [("grid.value", "double.x")],
        )

        record, _ = execute(make_engine, wf)

        records = run_store.get_component_runs(record.run_id, "double")
        assert [r.firing_index for r in records] == [0, 1, 2]
        assert outputs_of(run_store, record.run_id, "double", "y") == [0.0, 1.0, 2.0]

    def test_sequence_numbers_per_port(self, make_engine, run_store):
        """Test that output sequences count up per port."""
        wf = workflow(
            [sweep("grid", 0, 1, 3), script("double", DOUBLE)],
            [("grid.value", "double.x")],
        )

        record, _ = execute(make_engine, wf)

        sequences = [
            token.sequence
            for r in run_store.get_component_runs(record.run_id, "double")
            for token in r.outputs["y"]
        ]
        assert sequences == [0, 1, 2]

    def test_constant_input_reused(self, make_engine, run_store):
        """Test that a constant is read by every firing without being consumed."""
        wf = workflow(
            [
                sweep("grid", 1, 3, 3),
                source("gain", factor=10.0),
                script(
                    "scale", SCALE, inputs=(("x", "consumed"), ("factor", "constant"))
                ),
            ],
            [("grid.value", "scale.x"), ("gain.factor", "scale.factor")],
        )

        record, _ = execute(make_engine, wf)

        assert outputs_of(run_store, record.run_id, "scale", "y") == [
            10.0,
            20.0,
            30.0,
        ]

    def test_converger_loop(self, make_engine, run_store):
        """Test a feedback loop closed by a converger."""
        merger = {
            "id": "join",
            "kind": "builtin",
            "builtin": "merger",
            "config": {"type": "float", "inputs": 2},
        }
        converger = {
            "id": "conv",
            "kind": "builtin",
            "builtin": "converger",
            "config": {"eps_abs": 1e-4, "max_iterations": 100},
        }
        wf = workflow(
            [source("seed", x=10.0), merger, converger, script("step", TOWARDS_TWO)],
            [
                ("seed.x", "join.in1"),
                ("step.y", "join.in2"),
                ("join.out", "conv.x"),
                ("conv.loop", "step.x"),
            ],
        )

        record, _ = execute(make_engine, wf)

        assert record.status is RunStatus.FINISHED
        (final,) = outputs_of(run_store, record.run_id, "conv", "final")
        assert final == pytest.approx(2.0, abs=1e-3)
        assert outputs_of(run_store, record.run_id, "conv", "converged") == [True]

    def test_switch_routes_one_branch(self, make_engine, run_store):
        """Test that only the matching branch receives the token."""
        switch = {
            "id": "gate",
            "kind": "builtin",
            "builtin": "switch",
            "config": {"operator": ">", "threshold": 0.5},
        }
        wf = workflow(
            [source("v", x=0.7), switch, script("high", DOUBLE), script("low", DOUBLE)],
            [("v.x", "gate.value"), ("gate.true", "high.x"), ("gate.false", "low.x")],
        )

        record, _ = execute(make_engine, wf)

        assert outputs_of(run_store, record.run_id, "high", "y") == [1.4]
        assert run_store.get_component_runs(record.run_id, "low") == []

    def test_stranded_tokens_reported(self, make_engine):
        """Test that tokens left in queues are reported when the run ends."""
        wf = workflow(
            [
                sweep("grid", 0, 1, 3),
                source("one", b=1.0),
                tool("add", "adder", ADDER_PORTS),
            ],
            [("grid.value", "add.a"), ("one.b", "add.b")],
        )

        record, events = execute(make_engine, wf)

        assert record.status is RunStatus.FINISHED
        assert events[-1]["event"] == "RunFinished"
        assert events[-1]["stranded"] == {"add": 2}

    def test_event_stream(self, make_engine):
        """Test the shape and order of engine events."""
        wf = workflow(
            [source("numbers", a=1.5, b=2.0), tool("add", "adder", ADDER_PORTS)],
            [("numbers.a", "add.a"), ("numbers.b", "add.b")],
        )

        record, events = execute(make_engine, wf)

        names = [e["event"] for e in events]
        assert names[0] == "RunStarted"
        assert names[-1] == "RunFinished"
        assert names.count("FiringStarted") == names.count("FiringFinished") == 2
        assert names.count("TokenRouted") == 2
        assert all(e["runId"] == record.run_id for e in events)
        started = next(e for e in events if e["event"] == "FiringStarted")
        assert set(started) >= {"componentId", "firingIndex", "hostNode", "at"}

    def test_sequential_order(self, make_engine):
        """Test that sequential mode fires the smallest ready id first."""
        wf = workflow(
            [
                source("b_src", x=1.0),
                source("a_src", x=2.0),
                script("c_double", DOUBLE),
            ],
            [("b_src.x", "c_double.x")],
        )

        _, events = execute(make_engine, wf, sequential=True)

        fired = [e["componentId"] for e in events if e["event"] == "FiringStarted"]
        assert fired == ["a_src", "b_src", "c_double"]

    def test_fan_out_follows_connection_order(self, make_engine, run_store):
        """Test that fan-out delivers in connection order, not by name."""
        merger = {
            "id": "m",
            "kind": "builtin",
            "builtin": "merger",
            "config": {"type": "float", "inputs": 2},
        }
        wf = workflow(
            [source("src", x=1.0), merger],
            [("src.x", "m.in2"), ("src.x", "m.in1")],
        )

        record, events = execute(make_engine, wf, sequential=True)

        routed = [e["target"] for e in events if e["event"] == "TokenRouted"]
        assert routed[:2] == ["m.in2", "m.in1"]
        firings = run_store.get_component_runs(record.run_id, "m")
        assert [list(f.inputs) for f in firings] == [["in2"], ["in1"]]

    def test_independent_firings_overlap(self, make_engine, run_store):
        """Test that two ready firings run at the same time when slots allow."""
        ports = [
            {"name": "seconds", "type": "float", "direction": "input"},
            {"name": "slept", "type": "float", "direction": "output"},
        ]
        wf = workflow(
            [
                source("first", seconds=0.2),
                source("second", seconds=0.2),
                tool("nap_a", "sleeper", ports),
                tool("nap_b", "sleeper", ports),
            ],
            [("first.seconds", "nap_a.seconds"), ("second.seconds", "nap_b.seconds")],
        )

        record, _ = execute(make_engine, wf, max_parallel_firings=2)

        (a,) = run_store.get_component_runs(record.run_id, "nap_a")
        (b,) = run_store.get_component_runs(record.run_id, "nap_b")
        assert record.status is RunStatus.FINISHED
        assert a.started_at < b.ended_at
        assert b.started_at < a.ended_at
        span = max(a.ended_at, b.ended_at) - min(a.started_at, b.started_at)
        durations = [(r.ended_at - r.started_at).total_seconds() for r in (a, b)]
        assert span.total_seconds() < sum(durations)
        assert span.total_seconds() < max(durations) + 0.15

    def test_sequential_matches_concurrent(self, make_engine, run_store):
        """Test that sequential mode records the same firings and outputs."""
        wf = workflow(
            [sweep("grid", 0, 2, 5), script("double", DOUBLE)],
            [("grid.value", "double.x")],
        )

        def summary(record):
            return sorted(
                (r.component_id, r.firing_index)
                for component in ("grid", "double")
                for r in run_store.get_component_runs(record.run_id, component)
            ), sorted(outputs_of(run_store, record.run_id, "double", "y"))

        concurrent, _ = execute(make_engine, wf, max_parallel_firings=4)
        sequential, _ = execute(make_engine, wf, sequential=True)

        assert summary(concurrent) == summary(sequential)
        assert summary(sequential)[1] == [0.0, 1.0, 2.0, 3.0, 4.0]


@pytest.mark.slow
class TestRandomWorkflows:
    """Tests comparing concurrent and sequential runs of generated workflows."""

    @pytest.mark.parametrize("seed", range(200))
    def test_same_firings_either_mode(self, make_engine, run_store, seed):
        """Test that both modes record the same firings and port order."""
        wf, after_merger = random_workflow(seed)

        concurrent, _ = execute(make_engine, wf, max_parallel_firings=4)
        sequential, _ = execute(make_engine, wf, sequential=True)

        assert concurrent.status is RunStatus.FINISHED
        assert sequential.status is RunStatus.FINISHED
        assert firing_multiset(run_store, concurrent.run_id) == firing_multiset(
            run_store, sequential.run_id
        )
        assert port_sequences(
            run_store, concurrent.run_id, after_merger
        ) == port_sequences(run_store, sequential.run_id, after_merger)


class TestFailures:
    """Tests for failing and cancelled runs."""

    def test_tool_failure_fails_run(self, make_engine, run_store, blobs):
        """Test that a failing firing fails the run and keeps its console."""
        wf = workflow(
            [
                source("cfg", code={"type": "integer", "value": 3}),
                tool(
                    "boom",
                    "failer",
                    [
                        {"name": "code", "type": "integer", "direction": "input"},
                        {"name": "never", "type": "text", "direction": "output"},
                    ],
                ),
            ],
            [("cfg.code", "boom.code")],
        )

        record, events = execute(make_engine, wf)

        assert record.status is RunStatus.FAILED
        assert record.cause["code"] == "TOOL_FAILED"
        assert events[-1]["event"] == "RunFailed"
        (firing,) = run_store.get_component_runs(record.run_id, "boom")
        assert firing.exit.exit_code == 3
        assert firing.exit.error["code"] == "TOOL_FAILED"
        assert b"failing with exit code 3" in blobs.get_bytes(firing.stderr)

    def test_failure_cancels_siblings(self, make_engine, run_store):
        """Test that a failing firing stops the others still running."""
        wf = workflow(
            [
                source("cfg", code={"type": "integer", "value": 2}, seconds=30.0),
                tool(
                    "boom",
                    "failer",
                    [
                        {"name": "code", "type": "integer", "direction": "input"},
                        {"name": "never", "type": "text", "direction": "output"},
                    ],
                ),
                tool(
                    "nap",
                    "sleeper",
                    [
                        {"name": "seconds", "type": "float", "direction": "input"},
                        {"name": "slept", "type": "float", "direction": "output"},
                    ],
                ),
            ],
            [("cfg.code", "boom.code"), ("cfg.seconds", "nap.seconds")],
        )

        started = time.monotonic()
        record, events = execute(make_engine, wf, max_parallel_firings=2)

        assert time.monotonic() - started < 15
        assert record.status is RunStatus.FAILED
        assert run_store.get_component_runs(record.run_id, "nap") == []
        finished = [e["componentId"] for e in events if e["event"] == "FiringFinished"]
        assert "nap" not in finished
        assert sleeper_processes() == []

    def test_validation_failure_creates_no_run(self, make_engine, run_store):
        """Test that an invalid workflow is refused before anything runs."""
        wf = workflow([tool("t", "thrust", ADDER_PORTS)])

        async def scenario():
            await make_engine().start_run(wf)

        with pytest.raises(ValidationFailed):
            asyncio.run(scenario())

        assert run_store.query_runs() == []

    def test_cancel_run(self, make_engine, run_store):
        """Test that cancelling stops a long firing promptly."""
        sleeper_ports = [
            {"name": "seconds", "type": "float", "direction": "input"},
            {"name": "slept", "type": "float", "direction": "output"},
        ]
        wf = workflow(
            [source("cfg", seconds=30.0), tool("nap", "sleeper", sleeper_ports)],
            [("cfg.seconds", "nap.seconds")],
        )
        events = []

        async def scenario():
            engine = make_engine()
            engine.add_listener(events.append)
            run_id = await engine.start_run(wf)
            for _ in range(100):
                if engine.run_state(run_id).running() == ["nap"]:
                    break
                await asyncio.sleep(0.05)
            record = await engine.cancel_run(run_id)
            with pytest.raises(UnknownRun):
                await engine.cancel_run(run_id)
            return record

        started = time.monotonic()
        record = asyncio.run(scenario())

        assert time.monotonic() - started < 15
        assert record.status is RunStatus.CANCELLED
        assert run_store.get_run(record.run_id).status is RunStatus.CANCELLED
        assert events[-1]["event"] == "RunCancelled"

    def test_cancel_unknown_run(self, make_engine, run_store):
        """Test cancelling a run id nobody knows."""

        async def scenario():
            await make_engine().cancel_run("nope")

        with pytest.raises(UnknownRun):
            asyncio.run(scenario())


class TestCrashRecovery:
    """Tests for runs whose controller dies mid-run."""

    CRASH_EXIT = 17

    @staticmethod
    def crash_after(make_engine, wf, count, conn):
        finished = []

        def on_event(event):
            if event["event"] == "FiringFinished":
                finished.append((event["componentId"], event["firingIndex"]))
                if len(finished) == count:
                    conn.send(finished[-1])
                    os._exit(TestCrashRecovery.CRASH_EXIT)

        async def scenario():
            engine = make_engine(max_parallel_firings=4)
            engine.add_listener(on_event)
            await engine.run(wf)

        asyncio.run(scenario())

    @pytest.mark.parametrize("count", range(1, 21))
    def test_finished_firings_survive(self, make_engine, tmp_path, blobs, count):
        """Test that every firing reported finished is in the reopened store."""
        switch = {
            "id": "gate",
            "kind": "builtin",
            "builtin": "switch",
            "config": {"operator": ">", "threshold": 0.5},
        }
        merger = {
            "id": "join",
            "kind": "builtin",
            "builtin": "merger",
            "config": {"type": "float", "inputs": 2},
        }
        wf = workflow(
            [sweep("grid", 0, 1, 12), switch, merger],
            [
                ("grid.value", "gate.value"),
                ("gate.true", "join.in1"),
                ("gate.false", "join.in2"),
            ],
        )
        context = multiprocessing.get_context("fork")
        parent_end, child_end = context.Pipe(duplex=False)
        child = context.Process(
            target=self.crash_after, args=(make_engine, wf, count, child_end)
        )
        child.start()
        child.join(30)

        assert child.exitcode == self.CRASH_EXIT
        last = parent_end.recv()
        reopened = RunStore(tmp_path / "store", blobs)
        (record,) = reopened.query_runs()
        firings = reopened.get_component_runs(record.run_id)
        assert len(firings) == count
        assert (firings[-1].component_id, firings[-1].firing_index) == tuple(last)
        assert record.status is RunStatus.RUNNING


class TestProvenance:
    """Tests for what a finished run leaves behind."""

    def test_journal_snapshot_and_export(self, make_engine, run_store, tmp_path):
        """Test that the canonical workflow and firings are exported."""
        wf = workflow(
            [source("numbers", a=1.5, b=2.0), tool("add", "adder", ADDER_PORTS)],
            [("numbers.a", "add.a"), ("numbers.b", "add.b")],
        )

        record, _ = execute(make_engine, wf)
        root = run_store.export_run(record.run_id, tmp_path / "export")

        assert parse_workflow((root / "workflow.wf").read_text()) == parse_workflow(
            record.workflow
        )
        sum_file = root / "add" / "0" / "outputs" / "sum" / "0.json"
        assert json.loads(sum_file.read_text())["value"] == 3.5
        assert "1.5 + 2.0 = 3.5" in (root / "add" / "0" / "stdout.txt").read_text()
