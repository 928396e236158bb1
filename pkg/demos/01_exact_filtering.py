"""Exact filtering of a 4-state cyclic chain observed through a 2-valued label.

The chain cycles 1 -> 2 -> 3 -> 4 -> 1 at unit rate; states 1 and 3 show the
label "1", states 2 and 4 show "0".  Watching only the label, the conditional
law of the hidden state lives on two segments (faces) of the simplex.  Between
label changes it follows a deterministic flow; at each label change it jumps.
For this model the flow is frozen, so the filter is piecewise constant and its
whole orbit from a non-uniform start is just four points.
"""

import numpy as np

from pdpfilter import (
    Distribution,
    FilterModel,
    ObservationModel,
    RandomSource,
    observe,
    sample_chain,
    validate_generator,
)

rate = validate_generator([[-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1], [1, 0, 0, -1]])
obs = ObservationModel.from_assignment(("1", "0", "1", "0"))
model = FilterModel(rate, obs)
mu = Distribution([0.5, 0.1, 0.2, 0.2])

path = sample_chain(rate, mu, 8.0, RandomSource(2024))
y = observe(path, obs)
traj = model.run_filter(y, mu)

print("hidden chain jumps: ", [(round(t, 3), s) for t, s in path.jumps])
print("observed label jumps:", [(round(t, 3), v) for t, v in y.jumps])
print()
print("filter restart points (the belief right after each label change):")
print(f"  t=0.000  label {y.initial_value}  weights {np.round(traj.value_at(0.0).weights, 4)}")
for j in traj.jumps:
    print(f"  t={j.time:.3f}  label {j.post.label}  weights {np.round(j.post.weights, 4)}")

print()
print("the orbit alternates between two weight profiles on each face:")
seen = {tuple(np.round(fp.weights, 6)) for _, fp in traj.segments}
for w in sorted(seen):
    print("  ", np.array(w))

print()
print("prediction: law of the state 0.5 time units past the horizon")
print("  ", np.round(model.predict(traj.value_at(8.0), 0.5).weights, 4))
