"""A numeric walkthrough of the reward and training objective.

Runs offline. Shows the piecewise reward, group-normalized advantages with
the uniform-group filter, the clipped policy-gradient loss on tiny hand-sized
batches, and the cosine-blended combination with the supervised loss.
"""

import math

from datasmith.objective import (
    GammaSchedule,
    LossBatch,
    TrajectoryTokens,
    advantages,
    blended_loss,
    dapo_loss,
    gamma_at,
    group_filter,
    length_reward,
    sft_loss,
    total_reward,
)

print("=== Length reward ===")
for tokens in (100, 256, 640, 1024, 2000):
    print(f"  answer of {tokens:>4} tokens -> r_length = {length_reward(tokens):.3f}")

print("\n=== Total reward branches ===")
print(f"  correct, 640-token answer   -> {total_reward(1, 1, length_reward(640)):+.3f}")
print(f"  well-formed but wrong       -> {total_reward(1, 0, 1.0):+.3f}")
print(f"  malformed and wrong         -> {total_reward(0, 0, 1.0):+.3f}")

print("\n=== Advantages and the uniform-group filter ===")
mixed = [1.0, 0.0, 0.0, 1.0]
print(f"  rewards {mixed} -> advantages {advantages(mixed)}")
for rewards in ([1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], [1.0, 0.75]):
    verdict = "kept for policy gradient" if group_filter(rewards) else "routed to SFT only"
    print(f"  group rewards {rewards} -> {verdict}")

print("\n=== Clipped policy-gradient loss on one-token trajectories ===")
# trajectory A: ratio 1.5 (log-prob rose), judged correct; B: fully masked foil
batch = LossBatch(
    trajectories=(
        TrajectoryTokens((math.log(1.5),), (0.0,), (True,), "g", reward=1.0),
        TrajectoryTokens((0.0,), (0.0,), (False,), "g", reward=0.0),
    )
)
print(f"  ratio 1.5, advantage +1, clip high 0.28 -> loss {dapo_loss(batch):+.3f}  (clipped at 1.28)")

batch_low = LossBatch(
    trajectories=(
        TrajectoryTokens((math.log(0.5),), (0.0,), (True,), "g", reward=0.0),
        TrajectoryTokens((0.0,), (0.0,), (False,), "g", reward=1.0),
    )
)
print(f"  ratio 0.5, advantage -1, clip low 0.20  -> loss {dapo_loss(batch_low):+.3f}  (floor at 0.8)")

print("\n=== Blending schedule ===")
schedule = GammaSchedule(total_steps=350)
for step in (0, 87, 175, 262, 350):
    print(f"  step {step:>3} -> gamma = {gamma_at(step, schedule):.4f}")

print("\n=== Blended loss on a toy batch ===")
toy = LossBatch(
    trajectories=(
        TrajectoryTokens((-0.1, -0.3), (-0.1, -0.3), (True, True), "g", reward=1.0),
        TrajectoryTokens((-0.2,), (-0.2,), (True,), "g", reward=0.0),
    )
)
print(f"  sft  = {sft_loss(toy):+.6f}")
print(f"  dapo = {dapo_loss(toy):+.6f}")
for gamma in (1.0, 0.5, 0.0):
    print(f"  blended(gamma={gamma}) = {blended_loss(gamma, toy):+.6f}")
