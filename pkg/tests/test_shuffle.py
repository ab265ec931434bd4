import numpy as np
import pytest

from trajgpt.dt import DTBatch, Trajectory, sample_window, stack_windows
from trajgpt.shuffle import (
    STREAMS,
    ShuffleSpec,
    apply_shuffle,
    batch_augmenter,
    derive_subseeds,
    inner_inter_shuffle,
    inner_shuffle,
    inter_shuffle,
    materialize_tokens,
)


def view_tokens(batch):
    """Independent token-sequence oracle: list of (modality, value bytes) per slot."""
    out = []
    for b in range(batch.batch_size):
        row = []
        for t in range(batch.context_length):
            step = {
                0: np.atleast_1d(batch.returns_to_go[b, t]),
                1: batch.states[b, t],
                2: batch.actions[b, t],
            }
            order = [0, 1, 2] if batch.slot_order is None else list(batch.slot_order[b, t])
            for m in order:
                row.append((STREAMS[m], step[m].tobytes()))
        out.append(row)
    return out


def random_batch(rng, B=None, K=None, full=False):
    B = B or int(rng.integers(1, 5))
    K = K or int(rng.integers(1, 7))
    rows = []
    for _ in range(B):
        T = K if full else int(rng.integers(1, 2 * K + 1))
        traj = Trajectory(
            states=rng.standard_normal((T, 3)),
            actions=np.tanh(rng.standard_normal((T, 2))),
            rewards=rng.standard_normal(T),
            env_name="r",
        )
        rows.append(sample_window(traj, 0, K, 1.0))
    return stack_windows(rows)


def snapshot(batch):
    return (
        batch.returns_to_go.copy(),
        batch.states.copy(),
        batch.actions.copy(),
        batch.timesteps.copy(),
        batch.mask.copy(),
        None if batch.slot_order is None else batch.slot_order.copy(),
    )


def assert_not_mutated(batch, snap):
    np.testing.assert_array_equal(batch.returns_to_go, snap[0])
    np.testing.assert_array_equal(batch.states, snap[1])
    np.testing.assert_array_equal(batch.actions, snap[2])
    np.testing.assert_array_equal(batch.timesteps, snap[3])
    np.testing.assert_array_equal(batch.mask, snap[4])
    assert (batch.slot_order is None) == (snap[5] is None)


# ---------------------------------------------------------------- spec type

def test_spec_validation():
    with pytest.raises(ValueError):
        ShuffleSpec(mode="outer")
    with pytest.raises(ValueError):
        ShuffleSpec(mode="inter", fixed_modality="rewards")
    ShuffleSpec(mode="inter", fixed_modality="states")


# ---------------------------------------------------------------- inner

def test_inner_identity_is_noop():
    batch = random_batch(np.random.default_rng(0), full=True)
    k = batch.context_length
    ident = {name: np.arange(k) for name in STREAMS}
    out = inner_shuffle(batch, ShuffleSpec(mode="inner", explicit_permutations=ident))
    np.testing.assert_array_equal(out.returns_to_go, batch.returns_to_go)
    np.testing.assert_array_equal(out.states, batch.states)
    np.testing.assert_array_equal(out.actions, batch.actions)
    assert out.slot_order is None


def test_inner_forced_state_permutation():
    # K=3, states reordered (3,1,2), returns/actions identity:
    # slots become (R1,s3,a1, R2,s1,a2, R3,s2,a3)
    batch = random_batch(np.random.default_rng(1), B=1, K=3, full=True)
    spec = ShuffleSpec(mode="inner", explicit_permutations={"states": [2, 0, 1]})
    out = inner_shuffle(batch, spec)
    tokens = view_tokens(out)[0]
    s = batch.states[0]
    assert tokens[1] == ("states", s[2].tobytes())
    assert tokens[4] == ("states", s[0].tobytes())
    assert tokens[7] == ("states", s[1].tobytes())
    np.testing.assert_array_equal(out.returns_to_go, batch.returns_to_go)
    np.testing.assert_array_equal(out.actions, batch.actions)
    np.testing.assert_array_equal(out.timesteps, batch.timesteps)


def test_inner_preserves_stream_multisets_and_slots():
    rng = np.random.default_rng(2)
    for trial in range(100):
        batch = random_batch(rng)
        snap = snapshot(batch)
        out = inner_shuffle(batch, ShuffleSpec(mode="inner", seed=trial))
        assert_not_mutated(batch, snap)
        assert out.slot_order is None  # slot pattern untouched
        np.testing.assert_array_equal(out.mask, batch.mask)
        np.testing.assert_array_equal(out.timesteps, batch.timesteps)
        for b in range(batch.batch_size):
            real = batch.mask[b]
            for orig, new in (
                (batch.returns_to_go, out.returns_to_go),
                (batch.states, out.states),
                (batch.actions, out.actions),
            ):
                np.testing.assert_array_equal(
                    np.sort(orig[b, real], axis=0), np.sort(new[b, real], axis=0)
                )
                np.testing.assert_array_equal(orig[b, ~real], new[b, ~real])


def test_inner_streams_permuted_independently():
    rng = np.random.default_rng(3)
    batch = random_batch(rng, B=1, K=6, full=True)
    out = inner_shuffle(batch, ShuffleSpec(mode="inner", seed=11))
    perm_of = {}
    for name, orig, new in (
        ("returns", batch.returns_to_go[0], out.returns_to_go[0]),
        ("states", batch.states[0], out.states[0]),
    ):
        perm = [int(np.flatnonzero((orig == v).all(axis=-1) if orig.ndim > 1 else orig == v)[0]) for v in new]
        perm_of[name] = perm
    assert perm_of["returns"] != perm_of["states"]


def test_inner_explicit_requires_full_window():
    batch = stack_windows([sample_window(
        Trajectory(np.zeros((2, 3)), np.zeros((2, 2)), np.ones(2), "r"), 0, 4, 1.0)])
    with pytest.raises(ValueError, match="padded"):
        inner_shuffle(batch, ShuffleSpec(mode="inner", explicit_permutations={"states": [0, 1, 2, 3]}))


def test_inner_invalid_permutation_rejected():
    batch = random_batch(np.random.default_rng(4), K=3, full=True)
    with pytest.raises(ValueError, match="permutation"):
        inner_shuffle(batch, ShuffleSpec(mode="inner", explicit_permutations={"states": [0, 0, 2]}))


# ---------------------------------------------------------------- inter

def test_inter_identity_is_noop():
    batch = random_batch(np.random.default_rng(5), full=True)
    k = batch.context_length
    spec = ShuffleSpec(mode="inter", explicit_permutations={"slots": np.tile([0, 1, 2], (k, 1))})
    out = inter_shuffle(batch, spec)
    assert out.slot_order is None
    np.testing.assert_array_equal(out.states, batch.states)


def test_inter_forced_single_step():
    # K=2, (a,R,s) at step 1 only -> (a1,R1,s1, R2,s2,a2)
    batch = random_batch(np.random.default_rng(6), B=1, K=2, full=True)
    spec = ShuffleSpec(mode="inter", explicit_permutations={"slots": [[2, 0, 1], [0, 1, 2]]})
    out = inter_shuffle(batch, spec)
    tokens = view_tokens(out)[0]
    assert [m for m, _ in tokens] == ["actions", "returns", "states", "returns", "states", "actions"]
    assert tokens[0][1] == batch.actions[0, 0].tobytes()
    assert tokens[1][1] == np.atleast_1d(batch.returns_to_go[0, 0]).tobytes()
    assert tokens[2][1] == batch.states[0, 0].tobytes()


def test_inter_preserves_stream_order():
    rng = np.random.default_rng(7)
    for trial in range(100):
        batch = random_batch(rng)
        snap = snapshot(batch)
        out = inter_shuffle(batch, ShuffleSpec(mode="inter", seed=trial))
        assert_not_mutated(batch, snap)
        np.testing.assert_array_equal(out.returns_to_go, batch.returns_to_go)
        np.testing.assert_array_equal(out.states, batch.states)
        np.testing.assert_array_equal(out.actions, batch.actions)
        tokens = view_tokens(out)
        for b in range(batch.batch_size):
            for name, stream in (
                ("returns", [np.atleast_1d(v).tobytes() for v in batch.returns_to_go[b]]),
                ("states", [v.tobytes() for v in batch.states[b]]),
                ("actions", [v.tobytes() for v in batch.actions[b]]),
            ):
                seen = [val for m, val in tokens[b] if m == name]
                assert seen == stream  # left-to-right reads t=1..K in order
            for t in range(batch.context_length):
                triple = sorted(m for m, _ in tokens[b][3 * t : 3 * t + 3])
                assert triple == ["actions", "returns", "states"]


def test_inter_padded_steps_keep_canonical_order():
    traj = Trajectory(np.zeros((2, 3)), np.zeros((2, 2)), np.ones(2), "r")
    batch = stack_windows([sample_window(traj, 0, 5, 1.0)])
    out = inter_shuffle(batch, ShuffleSpec(mode="inter", seed=12345))
    if out.slot_order is not None:
        np.testing.assert_array_equal(out.slot_order[0, 2:], np.tile([0, 1, 2], (3, 1)))


def test_inter_fixed_modality():
    rng = np.random.default_rng(8)
    batch = random_batch(rng, B=4, K=6, full=True)
    out = inter_shuffle(batch, ShuffleSpec(mode="inter", seed=9, fixed_modality="returns"))
    assert out.slot_order is not None
    np.testing.assert_array_equal(out.slot_order[:, :, 0], 0)  # returns pinned to slot 0
    swapped = out.slot_order[:, :, 1] == 2
    assert swapped.any() and (~swapped).any()


def test_inter_composes_with_existing_order():
    batch = random_batch(np.random.default_rng(10), B=1, K=1, full=True)
    once = inter_shuffle(batch, ShuffleSpec(mode="inter", explicit_permutations={"slots": [[2, 0, 1]]}))
    twice = inter_shuffle(once, ShuffleSpec(mode="inter", explicit_permutations={"slots": [[2, 0, 1]]}))
    # applying (a,R,s) twice maps canonical (R,s,a) to (s,a,R)
    assert [m for m, _ in view_tokens(twice)[0]] == ["states", "actions", "returns"]


# ---------------------------------------------------------------- inner-inter

def test_inner_inter_identity_is_noop():
    batch = random_batch(np.random.default_rng(11), full=True)
    k = batch.context_length
    spec = ShuffleSpec(
        mode="inner-inter",
        explicit_permutations={name: np.arange(k) for name in STREAMS}
        | {"slots": np.tile([0, 1, 2], (k, 1))},
    )
    out = inner_inter_shuffle(batch, spec)
    np.testing.assert_array_equal(out.states, batch.states)
    assert out.slot_order is None


def test_inner_inter_composition_contract():
    rng = np.random.default_rng(12)
    for trial in range(25):
        batch = random_batch(rng)
        spec = ShuffleSpec(mode="inner-inter", seed=trial)
        composed = inner_inter_shuffle(batch, spec)
        s_inner, s_inter = derive_subseeds(trial)
        manual = inter_shuffle(
            inner_shuffle(batch, ShuffleSpec(mode="inner", seed=s_inner)),
            ShuffleSpec(mode="inter", seed=s_inter),
        )
        np.testing.assert_array_equal(composed.returns_to_go, manual.returns_to_go)
        np.testing.assert_array_equal(composed.states, manual.states)
        np.testing.assert_array_equal(composed.actions, manual.actions)
        if composed.slot_order is None:
            assert manual.slot_order is None
        else:
            np.testing.assert_array_equal(composed.slot_order, manual.slot_order)


def test_inner_inter_preserves_window_multiset():
    rng = np.random.default_rng(13)
    for trial in range(50):
        batch = random_batch(rng, full=True)
        out = inner_inter_shuffle(batch, ShuffleSpec(mode="inner-inter", seed=trial))
        for b in range(batch.batch_size):
            before = sorted(view_tokens(batch)[b])
            after = sorted(view_tokens(out)[b])
            assert before == after


# ---------------------------------------------------------------- dispatch / augmenter

def test_apply_none_returns_input():
    batch = random_batch(np.random.default_rng(14))
    assert apply_shuffle(batch, ShuffleSpec(mode="none")) is batch


def test_apply_dispatches_deterministically():
    batch = random_batch(np.random.default_rng(15))
    for mode in ("inner", "inter", "inner-inter"):
        a = apply_shuffle(batch, ShuffleSpec(mode=mode, seed=4))
        b = apply_shuffle(batch, ShuffleSpec(mode=mode, seed=4))
        np.testing.assert_array_equal(a.states, b.states)
        assert (a.slot_order is None) == (b.slot_order is None)


def test_batch_augmenter_none_mode():
    assert batch_augmenter(ShuffleSpec(mode="none")) is None


def test_batch_augmenter_varies_by_step_not_by_call():
    batch = random_batch(np.random.default_rng(16), B=2, K=6, full=True)
    aug = batch_augmenter(ShuffleSpec(mode="inner", seed=5))
    a0, a0_again, a1 = aug(batch, 0), aug(batch, 0), aug(batch, 1)
    np.testing.assert_array_equal(a0.states, a0_again.states)
    assert not np.array_equal(a0.states, a1.states)


def test_materialize_matches_independent_view():
    rng = np.random.default_rng(17)
    batch = inter_shuffle(random_batch(rng), ShuffleSpec(mode="inter", seed=3))
    ours = [[(m, v.tobytes()) for m, v in row] for row in materialize_tokens(batch)]
    assert ours == view_tokens(batch)
