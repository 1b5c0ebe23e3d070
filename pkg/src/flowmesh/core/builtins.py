"""Built-in workflow components.

Each kind is a class registered in ``BUILTINS``. An instance is created per
workflow component (``create_builtin``); its constructor validates the config
and raises ``ConfigTypeError``/``ConfigRangeError``. Components with a port
schema that follows from the config expose it through ``derive_ports``.

Numeric config entries accept integer values wherever a float is expected, so
``{"from": 0, "to": 1}`` is a valid sweep config.
"""

import math
import re
from dataclasses import dataclass, field, replace
from typing import (
    Awaitable,
    Callable,
    ClassVar,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Type,
)

import numpy as np
from lxml import etree

from flowmesh.core.blobs import BlobStore
from flowmesh.core.optimizer import OptimizerState, optimizer_step
from flowmesh.exceptions import (
    ConfigRangeError,
    ConfigTypeError,
    DataValueError,
    IncomparableTypes,
    NonFiniteInput,
    PathNotFound,
    ValueParseError,
    XmlParseError,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.values import DataType, DataValue, parse_scalar_text
from flowmesh.models.workflow import InputMode, PortSpec

logger = get_logger(__name__)

ScriptRunner = Callable[..., Awaitable[Tuple[Dict[str, DataValue], object]]]


@dataclass
class FiringContext:
    """What a built-in may use while firing."""

    component_id: str
    blobs: BlobStore
    run_script: ScriptRunner


@dataclass
class FiringResult:
    """Outputs of one firing; each port may carry several values in order."""

    outputs: Dict[str, List[DataValue]] = field(default_factory=dict)
    stdout: str = ""
    stderr: str = ""
    exit_code: Optional[int] = None
    # Loop drivers set this once they emitted their terminal outputs.
    finished: bool = False


class BuiltinComponent:
    """Base class of the built-in kinds."""

    kind: ClassVar[str] = ""
    loop_driver: ClassVar[bool] = False

    def __init__(
        self, config: Mapping[str, DataValue], ports: Sequence[PortSpec] = ()
    ):
        self.config = dict(config)
        derived = self.derive_ports(self.config)
        if ports:
            self.ports = tuple(ports)
        elif derived is not None:
            self.ports = derived
        else:
            self.ports = ()
        self.configure()

    @classmethod
    def derive_ports(
        cls, config: Mapping[str, DataValue]
    ) -> Optional[Tuple[PortSpec, ...]]:
        """Port schema implied by ``config``, or None when ports are declared."""
        return None

    def configure(self) -> None:
        """Validate the config; called once from the constructor."""

    async def fire(
        self, inputs: Dict[str, DataValue], ctx: FiringContext
    ) -> FiringResult:
        raise NotImplementedError

    # --- config helpers -----------------------------------------------------

    def _get(self, key: str, default: Optional[DataValue] = None) -> DataValue:
        value = self.config.get(key, default)
        if value is None:
            raise ConfigTypeError(
                f"{self.kind}: config {key!r} is required", {"key": key}
            )
        return value

    def _float(self, key: str, default: Optional[float] = None) -> float:
        fallback = None if default is None else DataValue.float_(default)
        value = self._get(key, fallback)
        if value.type is DataType.INTEGER:
            return float(value.value)
        if value.type is not DataType.FLOAT:
            raise ConfigTypeError(
                f"{self.kind}: config {key!r} must be a number, "
                f"got {value.type.value}",
                {"key": key},
            )
        return value.value

    def _int(self, key: str, default: Optional[int] = None) -> int:
        fallback = None if default is None else DataValue.integer(default)
        value = self._get(key, fallback)
        if value.type is not DataType.INTEGER:
            raise ConfigTypeError(
                f"{self.kind}: config {key!r} must be an integer, "
                f"got {value.type.value}",
                {"key": key},
            )
        return value.value

    def _text(self, key: str, default: Optional[str] = None) -> str:
        fallback = None if default is None else DataValue.text(default)
        value = self._get(key, fallback)
        if value.type is not DataType.TEXT:
            raise ConfigTypeError(
                f"{self.kind}: config {key!r} must be text, got {value.type.value}",
                {"key": key},
            )
        return value.value

    def _float_list(self, key: str) -> Tuple[float, ...]:
        value = self._get(key)
        if value.type in (DataType.FLOAT, DataType.INTEGER):
            return (float(value.value),)
        if value.type is not DataType.FLOAT_LIST:
            raise ConfigTypeError(
                f"{self.kind}: config {key!r} must be a float list, "
                f"got {value.type.value}",
                {"key": key},
            )
        return value.value

    def output_names(self) -> List[str]:
        return [p.name for p in self.ports if not p.is_input]


class ValueSource(BuiltinComponent):
    """Emits each configured value once per run."""

    kind = "value_source"

    @classmethod
    def derive_ports(cls, config):
        return tuple(
            PortSpec.output(name, value.type) for name, value in sorted(config.items())
        )

    def configure(self) -> None:
        for port in self.ports:
            if port.is_input:
                raise ConfigTypeError(f"value_source takes no inputs ({port.name})")
            value = self.config.get(port.name)
            if value is None or value.type is not port.datatype:
                got = "nothing" if value is None else value.type.value
                raise ConfigTypeError(
                    f"value_source output {port.name!r} is "
                    f"{port.datatype.value}, config supplies {got}",
                    {"key": port.name},
                )

    async def fire(self, inputs, ctx):
        return FiringResult(
            outputs={p.name: [self.config[p.name]] for p in self.ports},
            finished=True,
        )


class Script(BuiltinComponent):
    """Runs a script through the node interpreter (tool pipeline, no command)."""

    kind = "script"

    def configure(self) -> None:
        self.script = self._text("script")

    async def fire(self, inputs, ctx):
        outputs, run = await ctx.run_script(
            self.script, self.ports, inputs, label=ctx.component_id
        )
        return FiringResult(
            outputs={name: [value] for name, value in outputs.items()},
            stdout=run.stdout,
            stderr=run.stderr,
            exit_code=0,
        )


SWITCH_OPERATORS: Dict[str, Callable[[object, object], bool]] = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "=": lambda a, b: a == b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
}
_OPERATOR_ALIASES = {"≤": "<=", "≥": ">=", "==": "="}
_ORDERED_TYPES = (DataType.FLOAT, DataType.INTEGER)
_EQUALITY_TYPES = _ORDERED_TYPES + (DataType.BOOLEAN, DataType.TEXT)


def compare(operator: str, value: DataValue, threshold: DataValue) -> bool:
    """Evaluate ``value <operator> threshold``.

    Raises:
        IncomparableTypes: The types differ or do not support the operator.
    """
    operator = _OPERATOR_ALIASES.get(operator, operator)
    allowed = _EQUALITY_TYPES if operator == "=" else _ORDERED_TYPES
    if value.type is not threshold.type or value.type not in allowed:
        raise IncomparableTypes(
            f"cannot compare {value.type.value} {operator} {threshold.type.value}"
        )
    return SWITCH_OPERATORS[operator](value.value, threshold.value)


class Switch(BuiltinComponent):
    """Forwards its input on ``true`` or ``false`` depending on a comparison."""

    kind = "switch"

    @classmethod
    def derive_ports(cls, config):
        threshold = config.get("threshold")
        if threshold is None:
            return None
        dtype = threshold.type
        return (
            PortSpec.input("value", dtype),
            PortSpec.output("true", dtype),
            PortSpec.output("false", dtype),
        )

    def configure(self) -> None:
        operator = self._text("operator")
        self.operator = _OPERATOR_ALIASES.get(operator, operator)
        if self.operator not in SWITCH_OPERATORS:
            raise ConfigRangeError(
                f"switch operator must be one of <, <=, =, >=, >; got {operator!r}",
                {"key": "operator"},
            )
        self.threshold = self._get("threshold")
        allowed = _EQUALITY_TYPES if self.operator == "=" else _ORDERED_TYPES
        if self.threshold.type not in allowed:
            raise ConfigTypeError(
                f"switch threshold of type {self.threshold.type.value} "
                f"does not support {self.operator}",
                {"key": "threshold"},
            )

    async def fire(self, inputs, ctx):
        value = inputs["value"]
        branch = "true" if compare(self.operator, value, self.threshold) else "false"
        return FiringResult(outputs={branch: [value]})


XML_PATH_RE = re.compile(
    r"^[A-Za-z_][\w.-]*(/[A-Za-z_][\w.-]*)*(@[A-Za-z_][\w.-]*)?$"
)


def xml_path_to_xpath(path: str) -> str:
    """Translate ``a/b/c`` or ``a/b@attr`` into an absolute XPath."""
    if not XML_PATH_RE.match(path):
        raise ConfigRangeError(f"invalid element path {path!r}")
    elements, _, attribute = path.partition("@")
    xpath = "/" + elements
    if attribute:
        xpath += "/@" + attribute
    return xpath


def parse_xml(data: bytes) -> etree._Element:
    """Parse the supported XML subset: no DTD, no entities, no namespaces."""
    parser = etree.XMLParser(
        resolve_entities=False, no_network=True, load_dtd=False, huge_tree=False
    )
    try:
        root = etree.fromstring(data, parser)
    except etree.XMLSyntaxError as e:
        raise XmlParseError(f"malformed XML: {e}") from e
    if root.getroottree().docinfo.doctype:
        raise XmlParseError("documents with a DTD are not supported")
    for element in root.iter(etree.Element):
        if element.nsmap or element.tag.startswith("{"):
            raise XmlParseError("XML namespaces are not supported")
        if any(name.startswith("{") for name in element.attrib):
            raise XmlParseError("XML namespaces are not supported")
    return root


def extract_text(root: etree._Element, path: str) -> str:
    """Text of the first node matching ``path`` in document order.

    Raises:
        PathNotFound: Nothing matches.
    """
    matches = root.getroottree().xpath(xml_path_to_xpath(path))
    if not matches:
        raise PathNotFound(f"no element matches {path!r}", {"path": path})
    first = matches[0]
    if isinstance(first, str):
        return str(first)
    return first.text or ""


class XmlExtract(BuiltinComponent):
    """Reads scalar values out of an XML file, one element path per output."""

    kind = "xml_extract"

    def configure(self) -> None:
        file_port = next((p for p in self.ports if p.is_input), None)
        if file_port is None or file_port.datatype is not DataType.FILE:
            raise ConfigTypeError("xml_extract needs a file input port")
        self.file_port = file_port.name
        self.paths: Dict[str, str] = {}
        for port in self.ports:
            if port.is_input:
                continue
            if port.datatype.is_blob:
                raise ConfigTypeError(
                    f"xml_extract output {port.name!r} must be a scalar type"
                )
            path = self._text(port.name)
            xml_path_to_xpath(path)
            self.paths[port.name] = path

    async def fire(self, inputs, ctx):
        document = inputs[self.file_port]
        root = parse_xml(ctx.blobs.get_bytes(document.value.hash))
        outputs: Dict[str, List[DataValue]] = {}
        for port in self.ports:
            if port.is_input:
                continue
            text = extract_text(root, self.paths[port.name])
            try:
                value = parse_scalar_text(port.datatype, text)
            except DataValueError as e:
                raise ValueParseError(
                    f"{self.paths[port.name]}: {e}", {"path": self.paths[port.name]}
                ) from e
            outputs[port.name] = [value]
        return FiringResult(outputs=outputs)


class Sweep(BuiltinComponent):
    """Emits ``steps`` evenly spaced values from ``from`` to ``to``, then the count."""

    kind = "sweep"

    @classmethod
    def derive_ports(cls, config):
        return (
            PortSpec.output("value", DataType.FLOAT),
            PortSpec.output("count", DataType.INTEGER),
        )

    def configure(self) -> None:
        self.start = self._float("from")
        self.stop = self._float("to")
        self.steps = self._int("steps")
        if self.steps < 1:
            raise ConfigRangeError(
                f"sweep steps must be at least 1, got {self.steps}", {"key": "steps"}
            )
        if not (math.isfinite(self.start) and math.isfinite(self.stop)):
            raise ConfigRangeError("sweep bounds must be finite")

    async def fire(self, inputs, ctx):
        values = np.linspace(self.start, self.stop, self.steps)
        return FiringResult(
            outputs={
                "value": [DataValue.float_(v) for v in values],
                "count": [DataValue.integer(self.steps)],
            },
            finished=True,
        )


class Merger(BuiltinComponent):
    """Fan-in: forwards every token arriving on ``in1..inK`` to ``out``."""

    kind = "merger"

    @classmethod
    def derive_ports(cls, config):
        dtype = config.get("type")
        count = config.get("inputs", DataValue.integer(2))
        if dtype is None or dtype.type is not DataType.TEXT:
            return None
        if count.type is not DataType.INTEGER or count.value < 1:
            return None
        try:
            datatype = DataType(dtype.value)
        except ValueError:
            return None
        inputs = tuple(
            PortSpec.input(f"in{i}", datatype, InputMode.CONSUMED, required=False)
            for i in range(1, count.value + 1)
        )
        return inputs + (PortSpec.output("out", datatype),)

    def configure(self) -> None:
        type_name = self._text("type")
        try:
            self.datatype = DataType(type_name)
        except ValueError:
            raise ConfigRangeError(
                f"merger type {type_name!r} is not a datatype", {"key": "type"}
            ) from None
        self.count = self._int("inputs", 2)
        if self.count < 1:
            raise ConfigRangeError("merger needs at least one input", {"key": "inputs"})

    async def fire(self, inputs, ctx):
        return FiringResult(outputs={"out": [inputs[k] for k in sorted(inputs)]})


@dataclass(frozen=True)
class ConvergerState:
    eps_abs: float
    eps_rel: float = 0.0
    max_iterations: int = 100
    previous: Optional[float] = None
    iteration: int = 0


@dataclass(frozen=True)
class ConvergerEmission:
    loop: Optional[float] = None
    final: Optional[float] = None
    converged: Optional[bool] = None

    @property
    def is_final(self) -> bool:
        return self.final is not None


def converger_step(
    state: ConvergerState, x: float
) -> Tuple[ConvergerState, ConvergerEmission]:
    """Feed one loop value; decide whether to iterate again or stop.

    Raises:
        NonFiniteInput: ``x`` is infinite or NaN.
    """
    if not math.isfinite(x):
        raise NonFiniteInput(f"converger input {x} is not finite")
    previous = state.previous
    state = replace(state, previous=x, iteration=state.iteration + 1)
    if previous is None:
        return state, ConvergerEmission(loop=x)
    converged = abs(x - previous) <= state.eps_abs + state.eps_rel * abs(previous)
    if converged or state.iteration >= state.max_iterations:
        return state, ConvergerEmission(final=x, converged=converged)
    return state, ConvergerEmission(loop=x)


class Converger(BuiltinComponent):
    """Loop driver closing a cycle once successive values agree."""

    kind = "converger"
    loop_driver = True

    @classmethod
    def derive_ports(cls, config):
        return (
            PortSpec.input("x", DataType.FLOAT),
            PortSpec.output("loop", DataType.FLOAT),
            PortSpec.output("final", DataType.FLOAT),
            PortSpec.output("converged", DataType.BOOLEAN),
        )

    def configure(self) -> None:
        eps_abs = self._float("eps_abs")
        eps_rel = self._float("eps_rel", 0.0)
        max_iterations = self._int("max_iterations", 100)
        if not eps_abs > 0:
            raise ConfigRangeError("eps_abs must be positive", {"key": "eps_abs"})
        if eps_rel < 0:
            raise ConfigRangeError("eps_rel must be non-negative", {"key": "eps_rel"})
        if max_iterations < 1:
            raise ConfigRangeError(
                "max_iterations must be at least 1", {"key": "max_iterations"}
            )
        self.state = ConvergerState(eps_abs, eps_rel, max_iterations)

    async def fire(self, inputs, ctx):
        self.state, emission = converger_step(self.state, inputs["x"].value)
        if emission.is_final:
            return FiringResult(
                outputs={
                    "final": [DataValue.float_(emission.final)],
                    "converged": [DataValue.boolean(emission.converged)],
                },
                finished=True,
            )
        return FiringResult(outputs={"loop": [DataValue.float_(emission.loop)]})


class Optimizer(BuiltinComponent):
    """Loop driver minimizing the objective fed back for each candidate."""

    kind = "optimizer"
    loop_driver = True

    @classmethod
    def derive_ports(cls, config):
        return (
            PortSpec.input(
                "objective", DataType.FLOAT, InputMode.CONSUMED, required=False
            ),
            PortSpec.output("candidate", DataType.FLOAT_LIST),
            PortSpec.output("optimum", DataType.FLOAT_LIST),
            PortSpec.output("optimumValue", DataType.FLOAT),
        )

    def configure(self) -> None:
        self.state = OptimizerState.create(
            start=self._float_list("start"),
            lower=self._float_list("lower"),
            upper=self._float_list("upper"),
            f_tol=self._float("f_tol", 1e-8),
            x_tol=self._float("x_tol", 1e-6),
            max_evaluations=self._int("max_evaluations", 500),
        )

    async def fire(self, inputs, ctx):
        objective = inputs.get("objective")
        self.state, emission = optimizer_step(
            self.state, None if objective is None else objective.value
        )
        if emission.is_final:
            logger.info(
                "%s: optimum %s = %s after %d evaluations",
                ctx.component_id,
                emission.optimum,
                emission.optimum_value,
                self.state.evaluations,
            )
            return FiringResult(
                outputs={
                    "optimum": [DataValue.float_list(emission.optimum)],
                    "optimumValue": [DataValue.float_(emission.optimum_value)],
                },
                finished=True,
            )
        return FiringResult(
            outputs={"candidate": [DataValue.float_list(emission.candidate)]}
        )


BUILTINS: Dict[str, Type[BuiltinComponent]] = {
    cls.kind: cls
    for cls in (
        ValueSource,
        Script,
        Switch,
        XmlExtract,
        Sweep,
        Merger,
        Converger,
        Optimizer,
    )
}
LOOP_DRIVERS = frozenset(k for k, cls in BUILTINS.items() if cls.loop_driver)


def builtin_class(kind: str) -> Type[BuiltinComponent]:
    try:
        return BUILTINS[kind]
    except KeyError:
        raise ConfigTypeError(f"unknown built-in kind {kind!r}") from None


def derive_ports(
    kind: str, config: Mapping[str, DataValue]
) -> Optional[Tuple[PortSpec, ...]]:
    return builtin_class(kind).derive_ports(config)


def create_builtin(
    kind: str, config: Mapping[str, DataValue], ports: Sequence[PortSpec] = ()
) -> BuiltinComponent:
    """Instantiate a built-in; raises ConfigTypeError/ConfigRangeError."""
    return builtin_class(kind)(config, ports)
