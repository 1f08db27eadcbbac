"""Exception types shared across the engine."""


class DiffGameError(Exception):
    """Base class for engine errors."""


class UsageError(DiffGameError):
    """Invalid arguments: bad index, malformed config, wrong call order."""


class NoAdmissibleIndex(DiffGameError):
    """No control grid point satisfies the selector inequality at the
    requested tolerance; the supplied field is not an epsilon-super/subsolution
    at this point."""

    def __init__(self, player, x, eps, best_value):
        self.player = player
        self.x = x
        self.eps = eps
        self.best_value = best_value
        super().__init__(
            f"no admissible {player} index at x={x}: best value "
            f"{best_value:.6g} vs tolerance {eps:.3g}"
        )


class MeshTooCoarse(DiffGameError):
    """Cross-derivative terms break stencil positivity at this node;
    shrink h or supply a diagonally dominant diffusion."""


class NoConvergence(DiffGameError):
    """Policy iteration hit the outer cap. ``best`` carries the last iterate."""

    def __init__(self, max_outer, residual, best=None):
        self.max_outer = max_outer
        self.residual = residual
        self.best = best
        super().__init__(
            f"no convergence after {max_outer} outer iterations "
            f"(residual {residual:.3g})"
        )


class SingularLinearSystem(DiffGameError):
    """A frozen-policy linear solve failed; diagonal dominance was lost."""


class OutsideDomain(DiffGameError):
    """Point lies outside the domain where a field evaluation was requested."""


class StepRejected(DiffGameError):
    """A coefficient evaluation returned non-finite values during simulation."""
