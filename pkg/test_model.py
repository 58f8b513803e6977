import dataclasses

import pytest
import torch

from config import ModelConfig, TrainConfig
from errors import FormatError, NonFiniteError
from model import (AdaLNBlock, MeasureTransformer, MlpVectorField, adaln_block, adam_step, adam_step_count,
                   attention_finite, backward, build_model, load_checkpoint, make_optimizer, mlp_forward,
                   randomize_parameters, save_checkpoint, time_embedding, transformer_forward, zero_grad)

SMALL = ModelConfig(ambient_dim=2, hidden_dim=16, num_layers=2, num_heads=2, fourier_frequencies=4,
                    time_embed_dim=8, dropout_rate=0.0, mlp_ratio=2)


def random_model(config=SMALL, seed=1):
    return randomize_parameters(build_model(config), std=0.3, seed=seed)


def test_fresh_model_outputs_zero_field():
    model = build_model(SMALL)
    x = torch.randn(5, 2)
    assert torch.equal(transformer_forward(model, x, 0.3), torch.zeros(5, 2))


def test_build_is_seed_deterministic():
    a, b = build_model(SMALL), build_model(SMALL)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
    c = build_model(dataclasses.replace(SMALL, seed=1))
    assert not torch.equal(a.fourier.B, c.fourier.B)


def test_permutation_equivariance():
    model = random_model()
    generator = torch.Generator().manual_seed(0)
    x = torch.randn(7, 2, generator=generator)
    out = transformer_forward(model, x, 0.4)
    for _ in range(100):
        perm = torch.randperm(7, generator=generator)
        permuted = transformer_forward(model, x[perm], 0.4)
        assert (permuted - out[perm]).abs().max() < 1e-10


def test_output_depends_on_the_measure():
    model = random_model()
    query = torch.tensor([[0.1, -0.2]])
    ctx_a = torch.cat([query, torch.randn(4, 2)])
    ctx_b = torch.cat([query, torch.randn(4, 2) + 3.0])
    diff = transformer_forward(model, ctx_a, 0.5)[0] - transformer_forward(model, ctx_b, 0.5)[0]
    assert diff.norm() > 0


def test_mlp_has_no_measure_dependence():
    model = random_model(dataclasses.replace(SMALL, arch="mlp"))
    assert isinstance(model, MlpVectorField)
    query = torch.tensor([[0.1, -0.2]])
    a = mlp_forward(model, torch.cat([query, torch.randn(4, 2)]), 0.5)[0]
    b = model(torch.cat([query, torch.randn(4, 2) + 3.0]), 0.5)[0]
    assert torch.equal(a, b)


def test_single_token_attention_returns_value_projection():
    torch.manual_seed(0)
    q, k, v, out = (torch.nn.Linear(4, 4) for _ in range(4))
    token = torch.randn(1, 4)
    assert torch.allclose(attention_finite(token, q, k, v, out, 2), out(v(token)), atol=0, rtol=0)


def test_zero_initialized_block_is_identity():
    block = AdaLNBlock(8, 2, mlp_ratio=2)
    block.eval()
    tokens = torch.randn(3, 5, 8)
    assert torch.equal(adaln_block(tokens, torch.randn(3, 8), block), tokens)


def test_batched_and_unbatched_agree():
    model = random_model()
    x = torch.randn(2, 6, 2)
    batched = transformer_forward(model, x, torch.tensor([0.2, 0.7]))
    assert torch.allclose(batched[0], transformer_forward(model, x[0], 0.2), atol=1e-12)
    assert torch.allclose(batched[1], transformer_forward(model, x[1], 0.7), atol=1e-12)


def test_input_checks():
    model = build_model(SMALL)
    with pytest.raises(NonFiniteError):
        model(torch.tensor([[float("nan"), 0.0]]), 0.1)
    with pytest.raises(ValueError):
        model(torch.zeros(2, 2))
    static = build_model(dataclasses.replace(SMALL, time_conditioned=False))
    with pytest.raises(ValueError):
        static(torch.zeros(2, 2), 0.5)
    assert static(torch.zeros(2, 2)).shape == (2, 2)


def test_time_embedding_layout():
    emb = time_embedding(torch.tensor([0.0]), 8)
    assert torch.equal(emb, torch.tensor([[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]]))
    with pytest.raises(ValueError):
        time_embedding(0.1, 7)


def test_dropout_preserves_expectation():
    block = randomize_parameters(AdaLNBlock(8, 2, mlp_ratio=2, dropout_rate=0.1), std=0.3, seed=3)
    with torch.no_grad():
        # silence the MLP gate so the output is linear in the attention dropout mask
        block.modulation[-1].weight[40:].zero_()
        block.modulation[-1].bias[40:].zero_()
    tokens = torch.randn(1, 4, 8)
    cond = torch.randn(1, 8)
    block.eval()
    with torch.no_grad():
        expected = block(tokens, cond)[0, 0, 0].item()
        block.train()
        torch.manual_seed(0)
        samples = torch.tensor([block(tokens, cond)[0, 0, 0].item() for _ in range(10_000)])
    stderr = samples.std().item() / 100.0
    assert abs(samples.mean().item() - expected) < 3 * stderr + 1e-12


def test_backward_contract():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    loss = (p ** 2).sum()
    backward(loss)
    assert torch.equal(p.grad, torch.tensor([2.0, -4.0]))
    backward((p ** 2).sum())
    assert torch.equal(p.grad, torch.tensor([4.0, -8.0]))
    with pytest.raises(ValueError):
        backward(p * 2)


def test_adam_matches_reference_on_scalar():
    p = torch.nn.Parameter(torch.tensor([0.5]))
    model = torch.nn.Module()
    model.p = p
    optimizer = make_optimizer(model, 0.1)
    m = v = 0.0
    expected = 0.5
    for step in range(1, 4):
        zero_grad(model)
        p.grad = torch.tensor([1.0])
        adam_step(model, optimizer, 0.1)
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        m_hat, v_hat = m / (1 - 0.9 ** step), v / (1 - 0.999 ** step)
        expected -= 0.1 * m_hat / (v_hat ** 0.5 + 1e-8)
        assert p.item() == pytest.approx(expected, abs=1e-12)
    assert adam_step_count(optimizer, p) == 3


def test_adam_zero_gradient_keeps_parameters():
    model = build_model(SMALL)
    before = [p.detach().clone() for p in model.parameters()]
    optimizer = make_optimizer(model, 1e-3)
    adam_step(model, optimizer, 1e-3)
    for a, p in zip(before, model.parameters()):
        assert torch.equal(a, p)
    with pytest.raises(ValueError):
        adam_step(model, optimizer, 0.0)


def test_checkpoint_round_trip(tmp_path):
    model = random_model()
    optimizer = make_optimizer(model, 1e-3)
    x = torch.randn(1, 4, 2)
    backward(model(x, 0.3).pow(2).sum())
    adam_step(model, optimizer, 1e-3)
    train = TrainConfig(loss_kind="tfm", lr=1e-3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, step=7, optimizer=optimizer, train_config=train)
    assert path.read_bytes()[:4] == b"M2MK"

    restored = load_checkpoint(path)
    assert restored.config == SMALL
    assert restored.step == 7
    assert restored.train["loss_kind"] == "tfm"
    assert isinstance(restored.model, MeasureTransformer)
    assert torch.equal(restored.model(x, 0.3), model(x, 0.3))
    new_optimizer = restored.restore_optimizer(make_optimizer(restored.model, 1e-3))
    for p in restored.model.parameters():
        assert adam_step_count(new_optimizer, p) == 1


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        load_checkpoint(path)
