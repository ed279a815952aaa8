"""Canonical 8-way action table shared by the engine, planners and world.

Grids are indexed (i, j) = (row, col) with row 0 at the top, so North
decreases i and East increases j.  Every module that cares about action
order (policy heads, neighbor gathers, search tie-breaking, entity moves)
must go through this table.
"""

import math

ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")

ACTION_OFFSETS = (
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
)

# Step length of each action: 1 for cardinal moves, sqrt(2) for diagonals.
ACTION_COSTS = tuple(math.sqrt(di * di + dj * dj) for di, dj in ACTION_OFFSETS)

N_ACTIONS = len(ACTION_OFFSETS)

# Neighborhood used by the planning recurrences: the cell itself first,
# then the 8 neighbors in action order.
NEIGHBORHOOD_OFFSETS = ((0, 0),) + ACTION_OFFSETS

ACTION_INDEX = {name: k for k, name in enumerate(ACTION_NAMES)}
