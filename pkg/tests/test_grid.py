import numpy as np
import pytest

from otflow import (
    OutsideDomainError,
    ScalarField,
    VectorField,
    build_grid,
    sample_vector_field,
)

from conftest import philox


class TestBuildGrid:
    def test_cell_counts(self):
        assert build_grid([4], [1.0]).cell_count == 4
        assert build_grid([3, 5], [1.0, 0.5]).cell_count == 15
        assert build_grid([8, 8, 8], [0.234, 0.234, 0.234]).cell_count == 512

    @pytest.mark.parametrize(
        "dims,spacing",
        [([0], [1.0]), ([-2], [1.0]), ([4], [0.0]), ([4], [-1.0]),
         ([2, 2, 2, 2], [1.0] * 4), ([4, 4], [1.0])],
    )
    def test_rejects_bad_geometry(self, dims, spacing):
        with pytest.raises(ValueError):
            build_grid(dims, spacing)

    def test_centers_and_lengths(self):
        g = build_grid([4], [0.5])
        np.testing.assert_allclose(g.axis_centers(0), [0.25, 0.75, 1.25, 1.75])
        assert g.lengths == (2.0,)
        assert g.cell_volume == 0.5

    def test_canonical_order_axis0_fastest(self):
        g = build_grid([2, 3], [1.0, 1.0])
        centers = g.cell_centers()
        # flat index of cell (i, j) is i + 2*j
        np.testing.assert_allclose(centers[1], [1.5, 0.5])
        np.testing.assert_allclose(centers[2], [0.5, 1.5])
        assert g.cells_of_points(np.array([[1.5, 0.5]]))[0] == 1

    def test_cells_of_points_clips_walls(self):
        g = build_grid([4, 4], [1.0, 1.0])
        idx = g.cells_of_points(np.array([[0.0, 0.0], [4.0, 4.0]]))
        assert idx[0] == 0
        assert idx[1] == g.cell_count - 1


class TestFields:
    def test_scalar_field_validates_length(self, grid_2d):
        with pytest.raises(ValueError):
            ScalarField(grid_2d, np.zeros(grid_2d.cell_count + 1))

    def test_scalar_field_rejects_nan(self, grid_2d):
        vals = np.zeros(grid_2d.cell_count)
        vals[0] = np.nan
        with pytest.raises(ValueError):
            ScalarField(grid_2d, vals)

    def test_vector_field_shape(self, grid_2d):
        with pytest.raises(ValueError):
            VectorField(grid_2d, np.zeros((3, grid_2d.cell_count)))

    def test_total_mass(self, grid_2d):
        f = ScalarField(grid_2d, np.full(grid_2d.cell_count, 2.0))
        assert f.total_mass() == pytest.approx(2.0 * grid_2d.cell_count)


class TestSampling:
    def test_cell_center_reproduces_stored_vector(self):
        g = build_grid([4, 3], [0.5, 1.0])
        rng = philox(3)
        v = VectorField(g, rng.standard_normal((2, g.cell_count)))
        for j in [0, 5, 11]:
            np.testing.assert_allclose(
                sample_vector_field(v, g.cell_centers()[j]), v.components[:, j]
            )

    def test_1d_midpoint(self):
        g = build_grid([2], [1.0])
        v = VectorField(g, np.array([[1.0, 3.0]]))
        assert sample_vector_field(v, [1.0])[0] == pytest.approx(2.0)

    def test_constant_field_everywhere(self):
        g = build_grid([5, 5], [0.2, 0.2])
        v = VectorField.constant(g, [0.7, -0.3])
        rng = philox(11)
        for _ in range(20):
            p = rng.uniform(0.0, 1.0, size=2)
            np.testing.assert_allclose(sample_vector_field(v, p), [0.7, -0.3])

    @pytest.mark.parametrize("dims,spacing", [([9], [0.7]), ([6, 8], [0.5, 0.3]),
                                              ([5, 4, 6], [0.3, 0.4, 0.2])])
    def test_affine_fields_exact_in_interior(self, dims, spacing):
        g = build_grid(dims, spacing)
        rng = philox(sum(dims))
        coef = rng.standard_normal((g.ndim, g.ndim))
        offset = rng.standard_normal(g.ndim)
        comp = (coef @ g.cell_centers().T) + offset[:, None]
        v = VectorField(g, comp)
        lo = np.asarray(spacing)  # one full cell away from each wall
        hi = np.asarray(g.lengths) - lo
        for _ in range(10):
            p = rng.uniform(lo, hi)
            np.testing.assert_allclose(
                sample_vector_field(v, p), coef @ p + offset, rtol=1e-12, atol=1e-12
            )

    def test_clamped_in_wall_strip(self):
        # between the wall and the first cell center the value is held constant
        g = build_grid([4], [1.0])
        v = VectorField(g, np.array([[2.0, 0.0, 0.0, -1.0]]))
        assert sample_vector_field(v, [0.1])[0] == pytest.approx(2.0)
        assert sample_vector_field(v, [3.9])[0] == pytest.approx(-1.0)

    def test_rejects_outside_domain(self):
        g = build_grid([4], [1.0])
        v = VectorField.zeros(g)
        with pytest.raises(OutsideDomainError):
            sample_vector_field(v, [-0.5])
        with pytest.raises(OutsideDomainError):
            sample_vector_field(v, [4.5])
