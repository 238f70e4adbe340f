import pytest

from morphsim.engine import CostModel, ModelSpec, Policy, ServingSimulator
from morphsim.kvpool import KvConfig
from morphsim.profiler import baseline_sequence
from morphsim.toymodel import Precision
from morphsim.workload import Trace, TraceEvent

SMALL_SIZES = {Precision.FULL: 400, Precision.Q8: 200, Precision.Q4: 100, Precision.Q3: 75}


def make_trace(rows):
    return Trace(tuple(TraceEvent(*r) for r in rows))


@pytest.fixture
def small_sim():
    """Factory for a 4-layer model with 10-byte blocks; layer swaps free 30 blocks each."""

    def build(policy=None, static_blocks=40, block_tokens=16, reserve=0, slack=0, cost=None,
              controller=None, sequence=None, audit=True):
        spec = ModelSpec(num_layers=4, layer_bytes=SMALL_SIZES)
        kv = KvConfig(block_tokens, 10, static_blocks)
        budget = 4 * SMALL_SIZES[Precision.FULL] + reserve + static_blocks * 10 + slack
        if controller is not None:
            policy = Policy.morph(controller)
            sequence = sequence or baseline_sequence("FRONT_TO_BACK", 4)
        return ServingSimulator(spec, kv, cost or CostModel(), policy or Policy.static_full(),
                                budget, reserve, sequence=sequence, audit=audit)

    return build


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
