"""Two-stage green security game: team allocation followed by patrolling.

A defender team of surveillance drones and park rangers protects a gridworld
park against attackers. The package provides the patrol simulator (with
detection and observation uncertainty, signaling and notification), the
heuristic attacker, a small numpy neural toolkit, multi-agent Double-DQN
patrol learning, allocation learning over autoencoder embeddings with
competitive policy optimization, and the experiment harness.
"""

from greenpatrol.grid import GridWorld, random_density, spatial_density

__all__ = ["GridWorld", "random_density", "spatial_density"]

__version__ = "0.1.0"
