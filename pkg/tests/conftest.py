import numpy as np
import pytest

from dpfield.deformer import DeformerParams, init_deformer, layer_shapes
from dpfield.fields import FieldConfig, Primitive, PrimitiveKind, quat_from_axis_angle
from dpfield.model import Part, ShapeModel


def random_primitive(rng, kind=None):
    if kind is None:
        kind = PrimitiveKind.CUBOID if rng.random() < 0.5 else PrimitiveKind.CYLINDER
    s = rng.uniform(0.1, 0.8, 3)
    if PrimitiveKind.parse(kind) is PrimitiveKind.CYLINDER:
        s[1] = s[0]
    rot = quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
    return Primitive(kind, rot, rng.uniform(-0.5, 0.5, 3), s, rng.uniform(0.2, 1.0))


def random_model(rng, n_parts=3, live_deformer=True, width=8):
    parts = []
    for _ in range(n_parts):
        if live_deformer:
            layers = [(rng.normal(0, 0.5, (a, b)), rng.normal(0, 0.2, b)) for a, b in layer_shapes(2, width)]
            dfm = DeformerParams(layers)
        else:
            dfm = init_deformer(int(rng.integers(1 << 30)), 1.0, 2, width)
        parts.append(Part(random_primitive(rng), dfm))
    return ShapeModel(parts, FieldConfig())


def single_part_model(primitive, width=8):
    return ShapeModel([Part(primitive, init_deformer(0, 0.0, 2, width))], FieldConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
