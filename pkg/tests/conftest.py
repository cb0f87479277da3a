import numpy as np
import pytest

from swiattn import model as model_module
from swiattn import numerics as nx
from swiattn import objective as objective_module
from swiattn.numerics import Tensor
from swiattn.objective import adaptive_weight, swiattn_objective
from swiattn.routing import hard_gate

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """Record one pass/fail line for a numbered criterion, print it, and return the verdict."""
    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


@pytest.fixture
def e2e_gradcheck(monkeypatch):
    """Relative error between the tape gradient of the regularised objective and central differences.

    The tape differentiates the straight-through surrogate 1(s > tau) + s - sg(s) with
    gamma = sg(gamma). Off the tape every sg(.) term is frozen at its base-point value,
    so the finite differences see exactly that surrogate. Raises if a perturbation
    flips a hard gate.
    """
    def check(model, tokens, h=1e-6):
        names = list(model.named_parameters())
        base = [model.named_parameters()[n].data.copy() for n in names]
        ref = model(tokens)
        gates0 = ref.gates()
        soft0 = [lo.soft_gate.data.copy() for lo in ref.layers]
        gamma0 = [g.copy() for g in swiattn_objective(ref, tokens, model.cfg.regularizer)[2].gamma]
        calls = {"gate": 0, "gamma": 0}

        def surrogate(soft, tau):
            if nx.is_grad_enabled():
                return hard_gate(soft, tau)
            i = calls["gate"] % len(soft0)
            calls["gate"] += 1
            return Tensor((soft0[i] > tau) + soft.data - soft0[i])

        def frozen_gamma(nll, mse, cfg):
            if nx.is_grad_enabled():
                return adaptive_weight(nll, mse, cfg)
            i = calls["gamma"] % len(gamma0)
            calls["gamma"] += 1
            return gamma0[i]

        with monkeypatch.context() as mp:
            mp.setattr(model_module, "hard_gate", surrogate)
            mp.setattr(objective_module, "adaptive_weight", frozen_gamma)

            def loss(*tensors):
                old = model.swap_parameters(dict(zip(names, tensors)))
                try:
                    out = model(tokens)
                    if not np.array_equal(out.gates() > 0.5, gates0 > 0.5):
                        raise AssertionError("perturbation flipped a gate")
                    return swiattn_objective(out, tokens, model.cfg.regularizer)[0]
                finally:
                    model.swap_parameters(old)
            return nx.gradcheck(loss, base, h=h)
    return check
