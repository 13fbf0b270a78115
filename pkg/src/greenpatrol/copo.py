"""Competitive policy optimization core.

Both players' updates solve locally regularized bilinear games in closed
form. With U the maximizing player's payoff, g_d = grad_d U, g_a = grad_a U
(the same payoff, differentiated in the opponent's parameters; the opponent
descends U), and H_da the mixed second derivative of U, the simultaneous
solution is

    delta_d = +alpha (I + alpha^2 H_da H_ad)^-1 (g_d - alpha H_da g_a)
    delta_a = -alpha (I + alpha^2 H_ad H_da)^-1 (g_a + alpha H_ad g_d)

The inverses are applied by conjugate gradient on the matrix-free operators,
never materializing the Hessian. Analytic bilinear and matrix-game
objectives are provided so the solver can be validated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CGError(RuntimeError):
    """Conjugate gradient failed to reach the requested residual."""


@dataclass(frozen=True)
class CoPOConfig:
    """Competitive-update hyperparameters."""

    alpha: float
    cg_iters: int = 10
    cg_tol: float = 1e-8
    n_samples: int = 10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def conjugate_gradient(apply_matrix, b: np.ndarray, max_iters: int = 10,
                       tol: float = 1e-8):
    """Solve A x = b for a symmetric positive-definite matrix-free operator.

    Stops when the residual norm falls below tol * max(1, ||b||). Returns
    (x, residual, status) with status one of "converged", "max_iters",
    "breakdown" (non-positive curvature, numerically singular system).
    """
    x = np.zeros_like(b)
    r = b.astype(float, copy=True)
    p = r.copy()
    rs = float(r @ r)
    threshold = tol * max(1.0, float(np.linalg.norm(b)))
    if np.sqrt(rs) <= threshold:
        return x, float(np.sqrt(rs)), "converged"
    for _ in range(max_iters):
        ap = apply_matrix(p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0.0:
            return x, float(np.sqrt(rs)), "breakdown"
        step = rs / pap
        x = x + step * p
        r = r - step * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= threshold:
            return x, float(np.sqrt(rs_new)), "converged"
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, float(np.sqrt(rs)), "max_iters"


@dataclass
class CoPODiagnostics:
    residual_d: float
    residual_a: float
    fallback: bool


def copo_deltas(
    g_d: np.ndarray,
    g_a: np.ndarray,
    hvp_da,
    hvp_ad,
    alpha: float,
    cg_iters: int = 10,
    cg_tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, CoPODiagnostics]:
    """Parameter deltas for both players of the local bilinear game.

    Sign convention: g_d and g_a are both gradients of the MAXIMIZING
    player's payoff U (g_a in the opponent's parameters); the opponent's
    returned delta already descends U. ``hvp_da(v)`` applies H_da = D^2_da U
    to an attacker-space vector; ``hvp_ad`` its transpose. On numerical
    breakdown of CG the update degrades to plain simultaneous gradient
    steps; running out of iterations raises CGError with the residual.
    """

    def matrix_d(v):
        return v + alpha ** 2 * hvp_da(hvp_ad(v))

    def matrix_a(v):
        return v + alpha ** 2 * hvp_ad(hvp_da(v))

    b_d = g_d - alpha * hvp_da(g_a)
    b_a = g_a + alpha * hvp_ad(g_d)
    x_d, res_d, status_d = conjugate_gradient(matrix_d, b_d, cg_iters, cg_tol)
    x_a, res_a, status_a = conjugate_gradient(matrix_a, b_a, cg_iters, cg_tol)
    if "max_iters" in (status_d, status_a):
        raise CGError(
            f"conjugate gradient did not converge in {cg_iters} iterations "
            f"(residuals {res_d:.3e}, {res_a:.3e})"
        )
    if "breakdown" in (status_d, status_a):
        return alpha * g_d, -alpha * g_a, CoPODiagnostics(res_d, res_a, True)
    return alpha * x_d, -alpha * x_a, CoPODiagnostics(res_d, res_a, False)


# ---------------------------------------------------------------------------
# analytic objectives for validating the solver


def bilinear_ops(coupling: np.ndarray):
    """Exact mixed-derivative operators of f(x, y) = x^T B y.

    The mixed second derivative of a bilinear form is the constant matrix B,
    so the operator pair is exact: (v -> B v, v -> B^T v).
    """

    def hvp_da(v):
        return coupling @ v

    def hvp_ad(v):
        return coupling.T @ v

    return hvp_da, hvp_ad


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


@dataclass(frozen=True)
class MatrixGame:
    """Two-player zero-sum matrix game with softmax-parameterized policies.

    ``payoff`` is the row player's payoff matrix; the row player maximizes
    p^T A q and the column player minimizes it. Gradients and the mixed
    Hessian are exact, which makes this the reference objective for the
    competitive updaters.
    """

    payoff: np.ndarray

    def policies(self, theta_row: np.ndarray, theta_col: np.ndarray):
        return softmax(theta_row), softmax(theta_col)

    def value(self, theta_row: np.ndarray, theta_col: np.ndarray) -> float:
        p, q = self.policies(theta_row, theta_col)
        return float(p @ self.payoff @ q)

    def gradients(self, theta_row: np.ndarray, theta_col: np.ndarray):
        """(grad_row U, grad_col U), both of the row player's payoff U."""
        p, q = self.policies(theta_row, theta_col)
        g_row = softmax_jacobian(p) @ (self.payoff @ q)
        g_col = softmax_jacobian(q) @ (self.payoff.T @ p)
        return g_row, g_col

    def mixed_hessian(self, theta_row: np.ndarray, theta_col: np.ndarray):
        """D^2_{theta_row, theta_col} of the row player's payoff."""
        p, q = self.policies(theta_row, theta_col)
        return softmax_jacobian(p) @ self.payoff @ softmax_jacobian(q)


MATCHING_PENNIES = MatrixGame(np.array([[1.0, -1.0], [-1.0, 1.0]]))


def copo_matrix_game_step(
    game: MatrixGame,
    theta_row: np.ndarray,
    theta_col: np.ndarray,
    alpha: float,
    cg_iters: int = 10,
    cg_tol: float = 1e-8,
):
    """One exact competitive update on a matrix game; returns new thetas."""
    g_row, g_col = game.gradients(theta_row, theta_col)
    h = game.mixed_hessian(theta_row, theta_col)
    hvp_da, hvp_ad = bilinear_ops(h)
    delta_row, delta_col, diag = copo_deltas(
        g_row, g_col, hvp_da, hvp_ad, alpha, cg_iters, cg_tol
    )
    return theta_row + delta_row, theta_col + delta_col, diag


def pg_matrix_game_step(
    game: MatrixGame, theta_row: np.ndarray, theta_col: np.ndarray, lr: float
):
    """Simultaneous plain-gradient step: row ascends, column descends."""
    g_row, g_col = game.gradients(theta_row, theta_col)
    return theta_row + lr * g_row, theta_col - lr * g_col


def matrix_fictitious_play(
    game: MatrixGame,
    theta_row: np.ndarray,
    theta_col: np.ndarray,
    iters: int,
    lr: float = 1.0,
    steps_per_iter: int = 25,
):
    """Fictitious-play reference loop on a matrix game.

    Each iteration both players compute a fresh gradient-based response to
    the average of the opponent's past policies (the exact expectation of
    uniform draws from that memory) and append it. Responses restart from
    the given thetas every round: a warm-started softmax response saturates
    at a simplex corner where its gradient vanishes and can never switch
    actions, which breaks the averaging property. Returns the policy
    history (memory) for both players.
    """
    rows, cols = [softmax(theta_row)], [softmax(theta_col)]
    for _ in range(iters):
        avg_row = np.mean(rows, axis=0)
        avg_col = np.mean(cols, axis=0)
        t_row = theta_row.copy()
        t_col = theta_col.copy()
        for _ in range(steps_per_iter):
            p = softmax(t_row)
            t_row = t_row + lr * (softmax_jacobian(p) @ (game.payoff @ avg_col))
            q = softmax(t_col)
            t_col = t_col - lr * (softmax_jacobian(q) @ (game.payoff.T @ avg_row))
        rows.append(softmax(t_row))
        cols.append(softmax(t_col))
    return np.array(rows), np.array(cols)
