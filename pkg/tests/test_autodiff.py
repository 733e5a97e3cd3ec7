import numpy as np
import pytest

from app.autodiff import tape
from app.autodiff.adam import AdamState, adam_step
from app.autodiff.mlp import mlp_eval, mlp_forward_var, mlp_init, time_embedding
from app.autodiff.tape import ParamVector, Var
from app.core.errors import ConfigurationError, NumericError, ShapeError
from app.schemas.experiment import MlpSpec
from app.services.verification import MLP_GRAD_TOLERANCE, mlp_gradient_errors


def test_param_vector_segments():
    """Test named segments of a flat parameter vector."""
    params = ParamVector(np.arange(6.0), [("W", (2, 2)), ("b", (2,))])
    assert params.size == 6
    assert np.array_equal(params.segment("W"), [[0.0, 1.0], [2.0, 3.0]])
    assert np.array_equal(params.segment("b"), [4.0, 5.0])
    assert [o[:3] for o in params.offsets()] == [("W", 0, 4), ("b", 4, 6)]
    with pytest.raises(KeyError):
        params.segment("c")


def test_param_vector_rejects_bad_layout_and_values():
    """Test that layouts must cover the vector and values must be finite."""
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(3), [("a", (2,))])
    with pytest.raises(NumericError):
        ParamVector(np.array([1.0, np.nan]))


def test_with_values_keeps_layout():
    """Test that with_values copies the layout, not the data."""
    params = ParamVector(np.zeros(4), [("W", (2, 2))])
    moved = params.with_values(np.ones(4))
    assert moved.layout == params.layout
    assert np.all(params.values == 0.0)


def test_value_and_grad_of_polynomial():
    """Test the gradient of sum(3 x^2)."""
    x = np.array([1.0, -2.0, 0.5])
    value, grad = tape.value_and_grad(lambda v: tape.reduce_sum(tape.square(v) * 3.0), x)
    assert value == pytest.approx(3.0 * np.sum(x ** 2))
    assert np.allclose(grad, 6.0 * x)


def test_broadcast_bias_gradient():
    """Test that a row bias added to a batch receives the summed gradient."""
    x = np.ones((3, 2))
    _, grad = tape.value_and_grad(lambda b: tape.reduce_sum(tape.add(x, b)), np.zeros(2))
    assert np.allclose(grad, [3.0, 3.0])


def test_matmul_shape_error():
    """Test that incompatible matrix shapes are rejected."""
    with pytest.raises(ShapeError):
        tape.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_value_names_the_primitive():
    """Test that log(0) raises NumericError naming the node."""
    with pytest.raises(NumericError) as exc:
        tape.log(Var.leaf([0.0]))
    assert exc.value.node == "log"


def test_numpy_left_operand_stays_on_tape():
    """Test that ndarray * Var produces a tape value."""
    out = np.ones(2) * Var.leaf(np.array([2.0, 3.0]))
    assert isinstance(out, Var)
    assert out.requires_grad
    assert np.allclose(out.value, [2.0, 3.0])


def test_stack_max_routes_gradient_to_winner():
    """Test that only the largest input receives the gradient."""
    x = np.array([1.0, -1.0])
    _, grad = tape.value_and_grad(lambda v: tape.reduce_sum(tape.stack_max([v * 1.0, v * 2.0])), x)
    assert np.allclose(grad, [2.0, 1.0])


def test_minimum_blocks_gradient_above_ceiling():
    """Test the subgradient of the upper clip."""
    _, grad = tape.value_and_grad(lambda v: tape.reduce_sum(tape.minimum(v, 1.0)), np.array([0.5, 2.0]))
    assert np.allclose(grad, [1.0, 0.0])


def test_constant_program_has_zero_gradient():
    """Test that a program ignoring its input returns a zero gradient."""
    value, grad = tape.value_and_grad(lambda v: Var(np.array(4.0)), np.ones(3))
    assert value == 4.0
    assert np.array_equal(grad, np.zeros(3))


def test_time_embedding_shape_and_values():
    """Test sinusoidal time features."""
    emb = time_embedding(0.0, 6, 4)
    assert emb.shape == (4, 6)
    assert np.allclose(emb[:, :3], 0.0)
    assert np.allclose(emb[:, 3:], 1.0)
    assert time_embedding(0.5, 0, 3).shape == (3, 0)


def test_mlp_init_zero_output():
    """Test that a freshly initialized network outputs zero."""
    spec = MlpSpec(layer_widths=[3, 5, 1], time_embedding_dim=2)
    params = mlp_init(spec, 0)
    assert params.size == 3 * 5 + 5 + 5 * 1 + 1
    assert np.array_equal(mlp_eval(spec, params, 0.3, np.ones((4, 1))), np.zeros((4, 1)))
    assert mlp_eval(spec, params, 0.3, np.ones(1)).shape == (1,)


def test_mlp_init_is_seeded():
    """Test that the same seed gives the same weights."""
    spec = MlpSpec(layer_widths=[4, 6, 6, 2], time_embedding_dim=2)
    assert np.array_equal(mlp_init(spec, 3).values, mlp_init(spec, 3).values)
    assert not np.array_equal(mlp_init(spec, 3).values, mlp_init(spec, 4).values)


def test_mlp_init_rejects_bad_widths():
    """Test that invalid widths raise ConfigurationError."""
    spec = MlpSpec.model_construct(layer_widths=[2, 0, 1], activation="tanh", time_embedding_dim=0)
    with pytest.raises(ConfigurationError):
        mlp_init(spec, 0)


def test_mlp_eval_rejects_wrong_state_dimension():
    """Test the state dimension check."""
    spec = MlpSpec(layer_widths=[3, 5, 1], time_embedding_dim=2)
    with pytest.raises(ShapeError):
        mlp_eval(spec, mlp_init(spec, 0), 0.0, np.ones((2, 2)))


@pytest.mark.parametrize("activation", ["tanh", "relu", "silu"])
def test_tape_forward_matches_numpy_forward(activation, rng):
    """Test that both forward passes agree."""
    spec = MlpSpec(layer_widths=[4, 7, 7, 2], activation=activation, time_embedding_dim=2)
    params = mlp_init(spec, 1)
    params = params.with_values(params.values + 0.2 * rng.standard_normal(params.size))
    x = rng.standard_normal((5, 2))
    on_tape = mlp_forward_var(spec, params, Var(params.values), 0.4, x).value
    assert np.allclose(on_tape, mlp_eval(spec, params, 0.4, x), atol=1e-12)


def test_mlp_gradients_match_finite_differences():
    """Test tape gradients of MLP losses against central differences."""
    assert max(mlp_gradient_errors(6, seed=2)) <= MLP_GRAD_TOLERANCE


def test_adam_first_step_moves_by_learning_rate():
    """Test the bias-corrected first Adam step in both directions."""
    params = ParamVector(np.zeros(2))
    grad = params.with_values(np.array([1.0, -1.0]))
    state = AdamState.fresh(2, learning_rate=0.1)
    up, new_state = adam_step(params, grad, state, ascent=True)
    down, _ = adam_step(params, grad, state)
    assert np.allclose(up.values, [0.1, -0.1])
    assert np.allclose(down.values, [-0.1, 0.1])
    assert new_state.step_count == 1
    assert state.step_count == 0


def test_adam_rejects_size_mismatch():
    """Test that mismatched sizes raise ShapeError."""
    with pytest.raises(ShapeError):
        adam_step(ParamVector(np.zeros(2)), ParamVector(np.zeros(3)), AdamState.fresh(2))
