import numpy as np
import pytest
from pydantic import ValidationError

from normdiff import ndmath as nd
from normdiff.denoisers import (
    FeatureTokenizer,
    FilmMlpConfig,
    FilmMlpDenoiser,
    SaintConfig,
    SaintDenoiser,
    build_denoiser,
    column_attention_block,
    film,
    row_attention_block,
    tokenize,
)
from normdiff.errors import ContractError, DimensionError


def _inputs(rng, batch, d=3, c=2):
    return rng.standard_normal((batch, d)), rng.uniform(0.05, 1.0, size=batch), rng.standard_normal((batch, c))


def _flat_gradient_error(denoiser, loss_fn):
    denoiser.zero_grad()
    nd.backward(loss_fn())
    analytic = denoiser.grad_flat()
    numeric = np.concatenate([nd.numerical_gradient(loss_fn, p).reshape(-1) for p in denoiser.parameters()])
    denoiser.zero_grad()
    return nd.relative_error(analytic, numeric)


class TestFilm:
    def test_affine(self):
        """Test gamma=2, beta=1, h=[1, 2] gives [3, 5]."""
        assert film(np.array([1.0, 2.0]), 2.0, 1.0).value.tolist() == [3.0, 5.0]

    def test_identity_collapse(self, mlp_config, rng):
        """Test zeroed FiLM heads make the network ignore covariates."""
        denoiser = FilmMlpDenoiser(3, 2, mlp_config, seed=1)
        for name, param in denoiser.params.items():
            if name.startswith("film_"):
                param.value = np.zeros_like(param.value)
        y_t, t_norm, c = _inputs(rng, 4)
        a = denoiser.forward(y_t, t_norm, c).value
        b = denoiser.forward(y_t, t_norm, c + 5.0).value
        assert np.array_equal(a, b)

    def test_conditioning_is_live(self, mlp_denoiser, rng):
        """Test the output responds to a covariate perturbation."""
        y_t, t_norm, c = _inputs(rng, 4)
        shifted = c.copy()
        shifted[:, 0] += 1e-3
        delta = mlp_denoiser.forward(y_t, t_norm, shifted).value - mlp_denoiser.forward(y_t, t_norm, c).value
        assert np.abs(delta).max() > 0

    def test_output_shape(self, mlp_denoiser, rng):
        """Test the MLP returns one prediction per IDP."""
        assert mlp_denoiser.forward(*_inputs(rng, 5)).shape == (5, 3)

    def test_shape_mismatch(self, mlp_denoiser, rng):
        """Test inputs with the wrong width are rejected."""
        y_t, t_norm, c = _inputs(rng, 2, d=4)
        with pytest.raises(DimensionError):
            mlp_denoiser.forward(y_t, t_norm, c)

    def test_gradient_check(self, mlp_denoiser, rng):
        """Test MLP gradients against finite differences."""
        y_t, t_norm, c = _inputs(rng, 4)
        target = rng.standard_normal((4, 3))

        def loss_fn():
            diff = nd.sub(mlp_denoiser.forward(y_t, t_norm, c), target)
            return nd.sum(nd.mul(diff, diff))

        assert _flat_gradient_error(mlp_denoiser, loss_fn) < 1e-4

    def test_batchnorm_eval_is_row_independent(self, rng):
        """Test batch norm uses running statistics at evaluation."""
        config = FilmMlpConfig(hidden_widths=[6], covariate_mlp_widths=[4], dropout_rate=0.0, use_batchnorm=True)
        denoiser = FilmMlpDenoiser(3, 2, config, seed=0)
        y_t, t_norm, c = _inputs(rng, 8)
        denoiser.forward(y_t, t_norm, c, phase="train")
        full = denoiser.forward(y_t, t_norm, c).value
        single = denoiser.forward(y_t[:1], t_norm[:1], c[:1]).value
        assert np.allclose(full[:1], single, atol=1e-12, rtol=0)

    def test_config_validation(self):
        """Test empty or non-positive widths are rejected."""
        with pytest.raises(ValidationError):
            FilmMlpConfig(hidden_widths=[])
        with pytest.raises(ValidationError):
            FilmMlpConfig(hidden_widths=[4, 0])
        with pytest.raises(ValidationError):
            FilmMlpConfig(dropout_rate=1.0)


class TestTokenizer:
    def _tokenizer(self, d=1, d_model=2, c=1):
        zeros = nd.parameter(np.zeros((c, d_model)))
        return FeatureTokenizer(
            weight=nd.parameter(np.ones((d, d_model))),
            bias=nd.parameter(np.zeros((d, d_model))),
            column_embedding=nd.parameter(np.tile([0.5, -0.5], (d, 1))),
            cov_weight=zeros,
            cov_bias=nd.parameter(np.zeros(d_model)),
            time_weight=nd.parameter(np.zeros((1, d_model))),
            time_bias=nd.parameter(np.zeros(d_model)),
        )

    def test_example(self):
        """Test w=[1, 1], b=0, e=[0.5, -0.5], zero projections and y=2 give [2.5, 1.5]."""
        tokens = tokenize(np.array([[2.0]]), np.array([0.5]), np.array([[1.0]]), self._tokenizer())
        assert tokens.value[0, 0].tolist() == [2.5, 1.5]

    def test_shared_projection_only(self, rng):
        """Test y=0, b=0, e=0 leaves proj(c) + proj(t) in every token."""
        tokenizer = self._tokenizer(d=3, d_model=4, c=2)
        tokenizer.column_embedding.value = np.zeros((3, 4))
        tokenizer.cov_weight.value = rng.standard_normal((2, 4))
        tokenizer.time_weight.value = rng.standard_normal((1, 4))
        c = rng.standard_normal((1, 2))
        tokens = tokenize(np.zeros((1, 3)), np.array([0.3]), c, tokenizer).value
        expected = c @ tokenizer.cov_weight.value + 0.3 * tokenizer.time_weight.value
        for d in range(3):
            assert np.allclose(tokens[0, d], expected[0])

    def test_feature_permutation(self, saint_denoiser, rng):
        """Test permuting features with their column parameters permutes tokens."""
        y_t, t_norm, c = _inputs(rng, 2)
        perm = [2, 0, 1]
        tok = saint_denoiser.tokenizer
        permuted = FeatureTokenizer(
            weight=nd.parameter(tok.weight.value[perm]),
            bias=nd.parameter(tok.bias.value[perm]),
            column_embedding=nd.parameter(tok.column_embedding.value[perm]),
            cov_weight=tok.cov_weight,
            cov_bias=tok.cov_bias,
            time_weight=tok.time_weight,
            time_bias=tok.time_bias,
        )
        a = tokenize(y_t, t_norm, c, tok).value
        b = tokenize(y_t[:, perm], t_norm, c, permuted).value
        assert np.allclose(a[:, perm], b, atol=1e-14)


class TestAttentionBlocks:
    def test_single_token_column_attention(self, saint_denoiser, rng):
        """Test with one token the attention output is the value projection."""
        col = saint_denoiser.column_params[0]
        tokens = nd.as_node(rng.standard_normal((2, 1, 8)))
        out = column_attention_block(tokens, col, n_heads=2).value
        h = nd.layernorm(tokens).value
        x = tokens.value + (h @ col["v"].value) @ col["o"].value + col["o_b"].value
        hidden = nd.layernorm(x).value @ col["ff1"].value + col["ff1_b"].value
        alpha = col["ff_alpha"].value
        hidden = np.where(hidden > 0, hidden, alpha * hidden)
        expected = x + hidden @ col["ff2"].value + col["ff2_b"].value
        assert np.allclose(out, expected, atol=1e-12)

    def test_uniform_tokens(self, saint_denoiser, rng):
        """Test identical tokens give an output uniform across positions."""
        row = rng.standard_normal(8)
        tokens = nd.as_node(np.tile(row, (1, 3, 1)))
        out = column_attention_block(tokens, saint_denoiser.column_params[0], n_heads=2).value
        assert np.allclose(out[0, 0], out[0, 1])
        assert np.allclose(out[0, 0], out[0, 2])

    def test_column_block_gradient(self, saint_denoiser, rng):
        """Test column-block gradients against finite differences."""
        tokens = nd.parameter(rng.standard_normal((2, 3, 8)), name="tokens")
        params = saint_denoiser.column_params[0]

        def loss_fn():
            out = column_attention_block(tokens, params, n_heads=2)
            return nd.sum(nd.mul(out, out))

        errors = nd.check_gradients(loss_fn, [tokens] + list(params.values()))
        assert max(errors.values()) < 1e-4

    def test_single_row_modes_agree(self, saint_denoiser, rng):
        """Test B=1 makes intersample and degenerate row attention identical."""
        tokens = nd.as_node(rng.standard_normal((1, 3, 8)))
        row = saint_denoiser.row_params[0]
        a = row_attention_block(tokens, row, 2, mode="intersample").value
        b = row_attention_block(tokens, row, 2, mode="degenerate").value
        assert np.allclose(a, b, atol=1e-14, rtol=0)

    def test_row_summary_is_token_mean(self, saint_denoiser, rng):
        """Test a lone row is updated by the value projection of its plain token mean."""
        tokens = nd.as_node(rng.standard_normal((1, 3, 8)))
        row = saint_denoiser.row_params[0]
        out = row_attention_block(tokens, row, 2, mode="degenerate").value
        summary = tokens.value.mean(axis=1)
        update = (summary @ row["v"].value) @ row["o"].value + row["o_b"].value
        assert np.allclose(out, tokens.value + update[:, None, :], atol=1e-12)

    def test_degenerate_ignores_other_rows(self, saint_denoiser, rng):
        """Test a perturbed stranger row leaves row b unchanged in degenerate mode."""
        values = rng.standard_normal((3, 3, 8))
        row = saint_denoiser.row_params[0]
        a = row_attention_block(nd.as_node(values), row, 2).value
        values[2] = 3.0 * rng.standard_normal((3, 8))
        b = row_attention_block(nd.as_node(values), row, 2).value
        assert np.allclose(a[:2], b[:2], atol=1e-12, rtol=0)

    def test_intersample_mixes_rows(self, saint_denoiser, rng):
        """Test intersample mode couples rows."""
        values = rng.standard_normal((3, 3, 8))
        row = saint_denoiser.row_params[0]
        a = row_attention_block(nd.as_node(values), row, 2, mode="intersample").value
        values[2] = 3.0 * rng.standard_normal((3, 8))
        b = row_attention_block(nd.as_node(values), row, 2, mode="intersample").value
        assert not np.allclose(a[0], b[0])

    def test_intersample_identical_rows(self, saint_denoiser, rng):
        """Test two identical rows receive identical updates."""
        one = rng.standard_normal((1, 3, 8))
        out = row_attention_block(nd.as_node(np.concatenate([one, one])), saint_denoiser.row_params[0], 2,
                                  mode="intersample").value
        assert np.allclose(out[0], out[1], atol=1e-14)

    def test_unknown_mode(self, saint_denoiser, rng):
        """Test an unknown row mode is a contract error."""
        with pytest.raises(ContractError):
            row_attention_block(nd.as_node(rng.standard_normal((1, 3, 8))), saint_denoiser.row_params[0], 2,
                                mode="global")


class TestSaint:
    def test_eval_batch_invariance(self, saint_denoiser, rng):
        """Test a subject's output is the same alone and inside a batch of 32."""
        y_t, t_norm, c = _inputs(rng, 32)
        batch = saint_denoiser.forward(y_t, t_norm, c).value
        alone = saint_denoiser.forward(y_t[5:6], t_norm[5:6], c[5:6]).value
        assert np.allclose(batch[5:6], alone, atol=1e-12, rtol=0)

    def test_eval_forces_degenerate(self, saint_denoiser, rng):
        """Test evaluation ignores a requested intersample mode."""
        assert saint_denoiser.choose_row_mode("eval", rng, "intersample") == "degenerate"

    def test_train_mode_coin(self, saint_config):
        """Test the per-step coin follows intersample_prob."""
        always = SaintDenoiser(3, 2, saint_config.model_copy(update={"intersample_prob": 1.0}))
        never = SaintDenoiser(3, 2, saint_config.model_copy(update={"intersample_prob": 0.0}))
        rng = np.random.default_rng(0)
        assert always.choose_row_mode("train", rng, None) == "intersample"
        assert never.choose_row_mode("train", rng, None) == "degenerate"
        assert never.choose_row_mode("train", rng, "intersample") == "intersample"
        assert always.choose_row_mode("train", None, None) == "degenerate"

    def test_zero_depth(self, saint_config, rng):
        """Test a zero-depth model is the linear head over tokens."""
        denoiser = SaintDenoiser(3, 2, saint_config.model_copy(update={"depth": 0}), seed=2)
        y_t, t_norm, c = _inputs(rng, 4)
        tokens = denoiser.tokenizer.tokenize(y_t, t_norm, c).value
        expected = (tokens * denoiser.params["head_w"].value).sum(axis=-1) + denoiser.params["head_b"].value
        assert np.allclose(denoiser.forward(y_t, t_norm, c).value, expected, atol=1e-12)

    @pytest.mark.parametrize("row_mode", ["degenerate", "intersample"])
    def test_gradient_check(self, saint_denoiser, rng, row_mode):
        """Test full SAINT gradients at D=3, d_model=8, depth=1."""
        y_t, t_norm, c = _inputs(rng, 3)
        target = rng.standard_normal((3, 3))

        def loss_fn():
            out = saint_denoiser.forward(y_t, t_norm, c, phase="train", row_mode=row_mode)
            diff = nd.sub(out, target)
            return nd.sum(nd.mul(diff, diff))

        assert _flat_gradient_error(saint_denoiser, loss_fn) < 1e-4

    def test_heads_must_divide(self):
        """Test d_model must be divisible by n_heads."""
        with pytest.raises(ValidationError):
            SaintConfig(d_model=10, n_heads=4)


class TestBuildDenoiser:
    def test_by_name(self, saint_config):
        """Test both backbones are built by identifier."""
        assert isinstance(build_denoiser("mlp", 3, 2, FilmMlpConfig(hidden_widths=[4])), FilmMlpDenoiser)
        assert isinstance(build_denoiser("saint", 3, 2, saint_config), SaintDenoiser)

    def test_from_dict(self):
        """Test configs may be given as plain dicts."""
        denoiser = build_denoiser("mlp", 2, 2, {"hidden_widths": [4], "covariate_mlp_widths": [3]})
        assert denoiser.config.hidden_widths == [4]

    def test_unknown_backbone(self):
        """Test an unknown identifier is a contract error."""
        with pytest.raises(ContractError):
            build_denoiser("resnet", 3, 2)

    def test_wrong_config_type(self, saint_config):
        """Test a config of the other backbone is rejected."""
        with pytest.raises(ContractError):
            build_denoiser("mlp", 3, 2, saint_config)

    def test_seeded_initialisation(self, mlp_config):
        """Test equal seeds give equal parameters."""
        a = build_denoiser("mlp", 3, 2, mlp_config, seed=4)
        b = build_denoiser("mlp", 3, 2, mlp_config, seed=4)
        assert np.array_equal(a.get_flat(), b.get_flat())


class TestFlatParameters:
    def test_round_trip(self, saint_denoiser):
        """Test set_flat(get_flat()) restores every parameter."""
        flat = saint_denoiser.get_flat()
        assert flat.size == saint_denoiser.n_params
        saint_denoiser.set_flat(flat * 2.0)
        assert np.array_equal(saint_denoiser.get_flat(), flat * 2.0)

    def test_size_mismatch(self, mlp_denoiser):
        """Test a parameter vector of the wrong size is rejected."""
        with pytest.raises(DimensionError):
            mlp_denoiser.set_flat(np.zeros(mlp_denoiser.n_params + 1))

    def test_predict_chunks(self, mlp_denoiser, rng):
        """Test chunked prediction equals a single forward pass."""
        y_t, t_norm, c = _inputs(rng, 10)
        full = mlp_denoiser.forward(y_t, t_norm, c).value
        assert np.allclose(mlp_denoiser.predict(y_t, t_norm, c, chunk_size=3), full, atol=1e-12)
