"""Tape ops: values against independent oracles, gradients against finite
differences, and the fused DFT path against the FFT path."""

import math

import numpy as np
import pytest

import pcno.autodiff as ad
from pcno.autodiff import (
    AdamState,
    ModeBlocks,
    Tensor,
    adam_step,
    align_join,
    backward,
    channel_mix,
    dft_truncated,
    extract_region,
    fft_region,
    gelu,
    idft_truncated,
    ifft_region,
    irfft_tx,
    mean,
    mode_channel_mix,
    parameter_gradients,
    pointwise_linear,
    region_mix,
    rfft_tx,
    truncate_modes,
    tsum,
    untruncate,
    wrap,
)

RNG = np.random.default_rng(20240915)


def rand(*shape, cplx=False):
    a = RNG.standard_normal(shape)
    if cplx:
        return a + 1j * RNG.standard_normal(shape)
    return a


def numeric_gradient(loss_fn, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences over the float64 view of one parameter."""
    flat = param.data.view(np.float64).ravel()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(loss_fn, params: dict[str, Tensor], rtol: float = 1e-5):
    grads, detached = parameter_gradients(loss_fn(), params)
    assert not detached
    for name, p in params.items():
        num = numeric_gradient(loss_fn, p)
        ana = np.ascontiguousarray(grads[name]).view(np.float64).ravel()
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        assert np.max(np.abs(num - ana)) / scale < rtol, \
            f"gradient mismatch for {name}: {np.max(np.abs(num - ana)) / scale:.2e}"


class TestElementwise:
    def test_sum_of_squares_gradient_exact(self):
        v = Tensor(rand(4, 5), requires_grad=True)
        loss = tsum(v * v)
        backward(loss)
        assert np.array_equal(v.grad, 2.0 * v.data)

    def test_arithmetic_values(self):
        a, b = rand(3, 3), rand(3, 3)
        ta, tb = wrap(a), wrap(b)
        assert np.allclose((ta + tb).data, a + b)
        assert np.allclose((ta - tb).data, a - b)
        assert np.allclose((ta * tb).data, a * b)
        assert np.allclose((ta / tb).data, a / b)
        assert np.allclose(abs(ta).data, np.abs(a))

    def test_elementwise_gradients(self):
        a = Tensor(rand(3, 4) + 3.0, requires_grad=True)
        b = Tensor(rand(3, 4) + 3.0, requires_grad=True)

        def loss():
            return mean(((a * b + a) / b - abs(a)) * (a - b))

        check_gradient(loss, {"a": a, "b": b})

    def test_broadcast_gradients(self):
        a = Tensor(rand(3, 4), requires_grad=True)
        c = Tensor(rand(4), requires_grad=True)

        def loss():
            return tsum((a + c) * (a + c))

        check_gradient(loss, {"a": a, "c": c})

    def test_sqrt_and_getitem(self):
        a = Tensor(np.abs(rand(5, 6)) + 0.5, requires_grad=True)

        def loss():
            return tsum(ad.sqrt(a)[1:4, ::2])

        check_gradient(loss, {"a": a})

    def test_complex_mul_gradient(self):
        # Complex chain ending in a real scalar: blocks -> w*blocks -> inverse
        # transform -> squared loss.  FD runs over the float64 views.
        w = Tensor(rand(1, 1, 1, 4, 3, cplx=True), requires_grad=True)
        v = Tensor(rand(1, 1, 1, 4, 3, cplx=True), requires_grad=True)

        def loss():
            back = idft_truncated(w * v, 8, 6)
            return tsum(back * back)

        check_gradient(loss, {"w": w, "v": v})


class TestGelu:
    def test_reference_values(self):
        x = wrap(np.array([0.0, 1.0, -1.0]))
        y = gelu(x).data
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), rel=1e-12)
        assert y[1] == pytest.approx(0.8413447460685429, rel=1e-10)
        assert y[2] == pytest.approx(-0.15865525393145707, rel=1e-9)

    def test_gradient(self):
        a = Tensor(rand(4, 3), requires_grad=True)

        def loss():
            return mean(gelu(a) * gelu(a))

        check_gradient(loss, {"a": a})


class TestPointwiseLinear:
    def test_identity(self):
        v = wrap(rand(2, 3, 4, 5))
        out = pointwise_linear(v, np.eye(3), np.zeros(3))
        assert np.allclose(out.data, v.data)

    def test_gradients(self):
        v = Tensor(rand(2, 3, 4, 2), requires_grad=True)
        W = Tensor(rand(5, 3), requires_grad=True)
        b = Tensor(rand(5), requires_grad=True)

        def loss():
            return mean(pointwise_linear(v, W, b) ** 2)

        check_gradient(loss, {"v": v, "W": W, "b": b})


class TestFftPath:
    def test_constant_field_dc_mode(self):
        c = 1.7
        v = wrap(np.full((6, 8), c))
        F = rfft_tx(v).data
        assert F[0, 0] == pytest.approx(c * 6 * 8)
        F[0, 0] = 0.0
        assert np.max(np.abs(F)) < 1e-10

    def test_round_trip_identity(self):
        for shape in [(16, 16), (5, 7), (2, 3, 12, 9), (4, 2, 3, 10, 16)]:
            v = rand(*shape)
            back = irfft_tx(rfft_tx(wrap(v)), shape[-2], shape[-1]).data
            assert np.max(np.abs(back - v)) < 1e-12

    def test_parseval_with_half_spectrum_weights(self):
        v = rand(12, 10)
        F = rfft_tx(wrap(v)).data
        w = np.full(F.shape[-1], 2.0)
        w[0] = 1.0
        w[-1] = 1.0   # even d_x: Nyquist column not doubled
        lhs = np.sum(v * v)
        rhs = np.sum(w * np.abs(F) ** 2) / (12 * 10)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("shape", [(6, 8), (5, 7), (4, 9)])
    def test_rfft_gradient_through_modulated_inverse(self, shape):
        # rfft -> multiply by a fixed complex mask -> irfft -> squared loss,
        # exercising both FFT adjoints on even and odd space lengths.
        v = Tensor(rand(*shape), requires_grad=True)
        mask = rand(*shape[:-1], shape[-1] // 2 + 1, cplx=True)

        def loss():
            F = rfft_tx(v) * Tensor(mask)
            back = irfft_tx(F, shape[-2], shape[-1])
            return mean(back * back)

        check_gradient(loss, {"v": v})

    def test_fft_roundtrip_gradient_is_identity(self):
        v = Tensor(rand(5, 8), requires_grad=True)
        target = rand(5, 8)

        def loss():
            back = irfft_tx(rfft_tx(v), 5, 8)
            diff = back - Tensor(target)
            return tsum(diff * diff)

        grads, _ = parameter_gradients(loss(), {"v": v})
        assert np.allclose(grads["v"], 2.0 * (v.data - target), atol=1e-12)

    @pytest.mark.parametrize("shape", [(2, 2, 6, 8), (1, 3, 5, 7)])
    def test_spectral_pipeline_gradient(self, shape):
        # rfft -> truncate -> untruncate -> irfft -> squared loss, checked by FD.
        v = Tensor(rand(*shape), requires_grad=True)
        z_t, z_x = 2, 3

        def loss():
            F = rfft_tx(v)
            blocks = truncate_modes(F, z_t, z_x)
            F2 = untruncate(blocks, shape[-2], shape[-1] // 2 + 1)
            back = irfft_tx(F2, shape[-2], shape[-1])
            return mean(back * back)

        check_gradient(loss, {"v": v})


class TestTruncation:
    def test_full_cutoffs_preserve_everything(self):
        v = rand(3, 8, 10)
        F = rfft_tx(wrap(v))
        blocks = truncate_modes(F, 4, 6)
        F2 = untruncate(blocks, 8, 6)
        assert np.array_equal(F2.data, F.data)

    def test_high_temporal_mode_lands_in_high_block(self):
        d_t, d_x = 8, 8
        F = np.zeros((d_t, d_x // 2 + 1), dtype=np.complex128)
        F[d_t - 1, 1] = 3.0 + 1.0j
        blocks = truncate_modes(wrap(F), 2, 3)
        assert blocks.high.data[-1, 1] == 3.0 + 1.0j
        assert np.all(blocks.low.data == 0.0)

    def test_retained_count_at_reference_cutoffs(self):
        F = wrap(rand(136, 76, cplx=True))
        blocks = truncate_modes(F, 25, 25)
        assert blocks.low.data.size + blocks.high.data.size == 2 * 25 * 25

    def test_cutoff_bounds_enforced(self):
        F = wrap(rand(8, 5, cplx=True))
        with pytest.raises(ValueError):
            truncate_modes(F, 5, 3)
        with pytest.raises(ValueError):
            truncate_modes(F, 2, 6)


class TestFusedDft:
    @pytest.mark.parametrize("shape,z", [((2, 1, 2, 12, 16), (3, 4)),
                                         ((1, 2, 3, 9, 11), (2, 3)),
                                         ((1, 1, 1, 8, 10), (4, 6))])
    def test_matches_fft_path(self, shape, z):
        z_t, z_x = z
        v = rand(*shape)
        F = rfft_tx(wrap(v))
        blocks = truncate_modes(F, z_t, z_x)
        ref = np.concatenate([blocks.low.data, blocks.high.data], axis=-2)
        fused = dft_truncated(wrap(v), z_t, z_x).data
        assert np.max(np.abs(fused - ref)) < 1e-11 * max(1.0, np.abs(ref).max())

    @pytest.mark.parametrize("shape,z", [((2, 1, 2, 12, 16), (3, 4)),
                                         ((1, 2, 3, 9, 11), (2, 3))])
    def test_inverse_matches_fft_path(self, shape, z):
        z_t, z_x = z
        d_t, d_x = shape[-2], shape[-1]
        stacked = rand(*shape[:-2], 2 * z_t, z_x, cplx=True)
        low = wrap(stacked[..., :z_t, :])
        high = wrap(stacked[..., z_t:, :])
        ref = irfft_tx(untruncate(ModeBlocks(low, high), d_t, d_x // 2 + 1),
                       d_t, d_x).data
        fused = idft_truncated(wrap(stacked), d_t, d_x).data
        assert np.max(np.abs(fused - ref)) < 1e-12 * max(1.0, np.abs(ref).max())

    def test_forward_gradient(self):
        v = Tensor(rand(1, 2, 2, 7, 9), requires_grad=True)

        def loss():
            blocks = dft_truncated(v, 2, 3)
            back = idft_truncated(blocks, 7, 9)
            return mean(back * back)

        check_gradient(loss, {"v": v})

    def test_blocks_gradient(self):
        blocks = Tensor(rand(1, 1, 2, 4, 3, cplx=True), requires_grad=True)

        def loss():
            back = idft_truncated(blocks, 9, 8)
            return tsum(back * back)

        check_gradient(loss, {"blocks": blocks})


def naive_region_mix(K1, block):
    B, C, E, nt, nx = block.shape
    f = K1.shape[2]
    out = np.zeros((B, C, f, nt, nx), dtype=np.complex128)
    for b in range(B):
        for c in range(C):
            for i in range(nt):
                for j in range(nx):
                    for fo in range(f):
                        for e in range(E):
                            out[b, c, fo, i, j] += K1[i, j, fo, e] * block[b, c, e, i, j]
    return out


def naive_channel_mix(K2, block):
    B, C, E, nt, nx = block.shape
    f = K2.shape[0]
    out = np.zeros((B, f, E, nt, nx), dtype=np.complex128)
    for b in range(B):
        for fo in range(f):
            for e in range(E):
                for c in range(C):
                    out[b, fo, e] += K2[fo, c, e] * block[b, c, e]
    return out


class TestMixes:
    def test_region_mix_identity(self):
        B, C, E, nt, nx = 2, 3, 3, 4, 3
        block = rand(B, C, E, nt, nx, cplx=True)
        K1 = np.zeros((nt, nx, E, E), dtype=np.complex128)
        K1[..., np.arange(E), np.arange(E)] = 1.0
        out = region_mix(wrap(block), wrap(K1)).data
        assert np.allclose(out, block, atol=1e-14)

    def test_region_mix_single_region_is_scalar_scaling(self):
        block = rand(2, 3, 1, 4, 3, cplx=True)
        K1 = rand(4, 3, 1, 1, cplx=True)
        out = region_mix(wrap(block), wrap(K1)).data
        assert np.allclose(out, K1[:, :, 0, 0] * block, atol=1e-13)

    def test_region_mix_matches_naive_loop(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            block = rng.standard_normal((2, 2, 3, 3, 2)) \
                + 1j * rng.standard_normal((2, 2, 3, 3, 2))
            K1 = rng.standard_normal((3, 2, 3, 3)) \
                + 1j * rng.standard_normal((3, 2, 3, 3))
            out = region_mix(wrap(block), wrap(K1)).data
            ref = naive_region_mix(K1, block)
            assert np.max(np.abs(out - ref)) < 1e-13 * max(1.0, np.abs(ref).max())

    def test_channel_mix_identity(self):
        B, C, E, nt, nx = 2, 4, 3, 3, 2
        block = rand(B, C, E, nt, nx, cplx=True)
        K2 = np.zeros((C, C, E), dtype=np.complex128)
        for e in range(E):
            K2[:, :, e] = np.eye(C)
        out = channel_mix(wrap(block), wrap(K2)).data
        assert np.allclose(out, block, atol=1e-14)

    def test_channel_mix_matches_naive_loop(self):
        for trial in range(20):
            rng = np.random.default_rng(100 + trial)
            block = rng.standard_normal((2, 3, 2, 2, 3)) \
                + 1j * rng.standard_normal((2, 3, 2, 2, 3))
            K2 = rng.standard_normal((4, 3, 2)) + 1j * rng.standard_normal((4, 3, 2))
            out = channel_mix(wrap(block), wrap(K2)).data
            ref = naive_channel_mix(K2, block)
            assert np.max(np.abs(out - ref)) < 1e-13 * max(1.0, np.abs(ref).max())

    def test_channel_mix_shared_weights_reduce_to_common_map(self):
        # Shared per-region weights equal the region-agnostic variant.
        block = rand(2, 3, 3, 2, 2, cplx=True)
        K_one = rand(4, 3, cplx=True)
        K2 = np.repeat(K_one[:, :, None], 3, axis=2)
        out = channel_mix(wrap(block), wrap(K2)).data
        for e in range(3):
            ref = np.einsum("fc,bcij->bfij", K_one, block[:, :, e])
            assert np.allclose(out[:, :, e], ref, atol=1e-13)

    def test_mode_channel_mix_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        block = rng.standard_normal((2, 3, 2, 3, 2)) \
            + 1j * rng.standard_normal((2, 3, 2, 3, 2))
        K = rng.standard_normal((4, 3, 2, 3, 2)) + 1j * rng.standard_normal((4, 3, 2, 3, 2))
        out = mode_channel_mix(wrap(block), wrap(K)).data
        ref = np.einsum("fcmno,bcmno->bfmno", K, block)
        assert np.max(np.abs(out - ref)) < 1e-13 * max(1.0, np.abs(ref).max())

    def test_mix_gradients(self):
        block = Tensor(rand(1, 2, 2, 4, 2, cplx=True), requires_grad=True)
        K1 = Tensor(rand(4, 2, 2, 2, cplx=True), requires_grad=True)
        K2 = Tensor(rand(2, 2, 2, cplx=True), requires_grad=True)

        def loss():
            mixed = channel_mix(region_mix(block, K1), K2)
            back = idft_truncated(
                ad.getitem(mixed, (slice(None), slice(None), 0)), 8, 6)
            return mean(back * back)

        check_gradient(loss, {"block": block, "K1": K1, "K2": K2})

    def test_mode_channel_mix_gradient(self):
        block = Tensor(rand(1, 2, 3, 2, 2, cplx=True), requires_grad=True)
        K = Tensor(rand(2, 2, 3, 2, 2, cplx=True), requires_grad=True)

        def loss():
            mixed = mode_channel_mix(block, K)
            back = idft_truncated(
                ad.getitem(mixed, (slice(None), slice(None), 0)), 6, 6)
            return mean(back * back)

        check_gradient(loss, {"block": block, "K": K})

    def test_ops_do_not_mutate_inputs(self):
        block = rand(1, 2, 2, 3, 2, cplx=True)
        K1 = rand(3, 2, 2, 2, cplx=True)
        saved_b, saved_k = block.copy(), K1.copy()
        region_mix(wrap(block), wrap(K1))
        assert np.array_equal(block, saved_b)
        assert np.array_equal(K1, saved_k)


class TestRegionFft:
    def test_round_trip(self):
        v = rand(2, 3, 3, 4, 5)
        back = ifft_region(fft_region(wrap(v))).data
        assert np.max(np.abs(back - v)) < 1e-13

    def test_gradient(self):
        v = Tensor(rand(1, 2, 3, 3, 4), requires_grad=True)
        K = Tensor(rand(2, 2, 3, 2, 2, cplx=True), requires_grad=True)

        def loss():
            F = fft_region(dft_truncated(v, 1, 2))
            mixed = mode_channel_mix(F, K)
            out = ifft_region(mixed)
            back = idft_truncated(out, 3, 4)
            return mean(back * back)

        check_gradient(loss, {"v": v, "K": K})


class TestAlignment:
    def test_round_trip_exact(self):
        regions = [rand(2, 3, 5, 8), rand(2, 3, 5, 6), rand(2, 3, 5, 4)]
        pads_t = (2, 2)
        pads_x = [(0, 0), (1, 1), (2, 2)]
        joined = align_join([wrap(r) for r in regions], pads_t, pads_x)
        assert joined.shape == (2, 3, 3, 9, 8)
        for e, r in enumerate(regions):
            back = extract_region(joined, e, pads_t, pads_x[e], 5, r.shape[-1])
            assert np.array_equal(back.data, r)

    def test_padded_cells_are_zero(self):
        regions = [np.ones((1, 1, 3, 4)), np.ones((1, 1, 3, 2))]
        joined = align_join([wrap(r) for r in regions], (1, 1), [(0, 0), (1, 1)]).data
        assert joined.sum() == 4 * 3 + 2 * 3
        assert np.all(joined[:, :, 0, 0, :] == 0)
        assert np.all(joined[:, :, 1, :, 0] == 0)

    def test_gradient(self):
        r0 = Tensor(rand(1, 2, 3, 4), requires_grad=True)
        r1 = Tensor(rand(1, 2, 3, 2), requires_grad=True)

        def loss():
            joined = align_join([r0, r1], (1, 0), [(0, 0), (1, 1)])
            a = extract_region(joined, 0, (1, 0), (0, 0), 3, 4)
            return mean(joined * joined) + tsum(a * a)

        check_gradient(loss, {"r0": r0, "r1": r1})


class TestBackwardMachinery:
    def test_detached_parameter_flagged(self):
        a = Tensor(rand(3), requires_grad=True)
        b = Tensor(rand(3), requires_grad=True)
        loss = tsum(a * a)
        grads, detached = parameter_gradients(loss, {"a": a, "b": b})
        assert detached == ["b"]
        assert np.array_equal(grads["b"], np.zeros(3))
        assert np.array_equal(grads["a"], 2 * a.data)

    def test_reused_tensor_accumulates(self):
        a = Tensor(rand(4), requires_grad=True)
        y = a * 3.0
        loss = tsum(y * y) - tsum(y)
        backward(loss)
        expected = 9.0 * 2.0 * a.data - 3.0
        assert np.allclose(a.grad, expected, atol=1e-12)

    def test_backward_requires_real_scalar(self):
        a = Tensor(rand(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(a * 2.0)

    def test_check_finite_flag(self):
        ad.CHECK_FINITE = True
        try:
            with np.errstate(divide="ignore"):
                with pytest.raises(FloatingPointError):
                    ad.div(wrap(np.ones(3)), wrap(np.zeros(3)))
        finally:
            ad.CHECK_FINITE = False


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(rand(4), requires_grad=True)
        params = {"p": p}
        before = p.data.copy()
        state = AdamState()
        adam_step(params, {"p": np.zeros(4)}, state, lr=1e-3, step=1)
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        # With constant gradient g, the bias-corrected first update is
        # lr * g / (|g| + eps') ~ lr in magnitude.
        p = Tensor(np.zeros(5), requires_grad=True)
        g = np.full(5, 0.37)
        state = AdamState()
        adam_step({"p": p}, {"p": g}, state, lr=1e-2, step=1)
        assert np.allclose(np.abs(p.data), 1e-2, rtol=1e-6)
        assert np.all(np.sign(p.data) == -1.0)

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(5)
            p = Tensor(rng.standard_normal(6), requires_grad=True)
            k = Tensor(rng.standard_normal(6) + 1j * rng.standard_normal(6),
                       requires_grad=True)
            state = AdamState()
            for step in range(1, 20):
                g = {"p": np.sin(p.data) + 0.1 * step,
                     "k": np.cos(k.data) * (1 + 1j)}
                adam_step({"p": p, "k": k}, g, state, lr=3e-3, step=step)
            return p.data.copy(), k.data.copy()

        (p1, k1), (p2, k2) = run(), run()
        assert np.array_equal(p1, p2)
        assert np.array_equal(k1, k2)

    def test_complex_update_equals_split_real_update(self):
        z = Tensor(np.array([1.0 + 2.0j, -0.5 + 0.25j]), requires_grad=True)
        g = np.array([0.3 + 0.7j, -0.2 + 0.1j])
        state = AdamState()
        adam_step({"z": z}, {"z": g}, state, lr=1e-2, step=1)

        re = Tensor(np.array([1.0, -0.5]), requires_grad=True)
        im = Tensor(np.array([2.0, 0.25]), requires_grad=True)
        state2 = AdamState()
        adam_step({"re": re, "im": im},
                  {"re": np.array([0.3, -0.2]), "im": np.array([0.7, 0.1])},
                  state2, lr=1e-2, step=1)
        assert np.allclose(z.data.real, re.data, atol=1e-15)
        assert np.allclose(z.data.imag, im.data, atol=1e-15)
