import json

import numpy as np
import pytest

from flatflow import geometry as geo

from conftest import vertex_angles


# -- shape builders ----------------------------------------------------------


def test_circle_build(circle256):
    assert circle256.mode == "curve2d"
    assert circle256.n_vertices == 256
    assert circle256.n_components == 1
    # uniform sampling: all edges equal
    ell = circle256.edge_lengths()
    assert ell.std() / ell.mean() < 1e-12


def test_icosphere_build(sphere3):
    assert sphere3.mode == "mesh3d"
    assert sphere3.n_vertices == 642
    assert sphere3.n_components == 1
    assert geo.measure(sphere3).volume_per_component[0] > 0
    # closed: Euler characteristic of a sphere
    assert sphere3.n_vertices - sphere3.unique_edges().shape[0] \
        + sphere3.triangles.shape[0] == 2


def test_open_mesh_rejected(sphere3):
    with pytest.raises(geo.GeometryError, match="not closed"):
        geo.DiscreteSurface.from_triangle_mesh(sphere3.vertices,
                                               sphere3.triangles[:-1])


def test_inconsistent_orientation_rejected(sphere3):
    tris = sphere3.triangles.copy()
    tris[0] = tris[0][::-1]
    with pytest.raises(geo.GeometryError, match="orientable"):
        geo.DiscreteSurface.from_triangle_mesh(sphere3.vertices, tris)


def test_bad_shape_params():
    with pytest.raises(geo.GeometryError):
        geo.build_shape({"kind": "circle", "R": -1.0, "n": 64})
    with pytest.raises(geo.GeometryError):
        geo.build_shape({"kind": "circle", "R": 1.0, "n": 4})
    with pytest.raises(geo.GeometryError):
        geo.build_shape({"kind": "nonsense"})
    with pytest.raises(geo.GeometryError):
        geo.build_shape({"kind": "sphere", "R": 1.0, "subdiv": 0})


def test_perturbed_circle_mode_content():
    surf = geo.build_shape({"kind": "perturbed_circle", "R": 1.0, "mode": 3,
                            "amplitude": 0.02, "n": 512})
    theta = vertex_angles(surf)
    r = np.linalg.norm(surf.vertices, axis=1)
    assert abs(r.mean() - 1.0) < 1e-3
    assert np.abs(r - (1.0 + 0.02 * np.cos(3 * theta))).max() < 1e-6


# -- curvature ---------------------------------------------------------------


def test_circle_curvature(circle256):
    curv = geo.compute_curvature(circle256)
    assert np.abs(curv.kappa - 1.0).max() <= 1e-3
    assert curv.K is None
    np.testing.assert_allclose(curv.H, curv.kappa)
    # outward normals
    radial = circle256.vertices / np.linalg.norm(circle256.vertices, axis=1)[:, None]
    assert np.abs(curv.normal - radial).max() < 1e-6
    assert np.abs(np.linalg.norm(curv.normal, axis=1) - 1.0).max() < 1e-12


def test_sphere_curvature(sphere4_bundle):
    _, curv, _ = sphere4_bundle
    assert np.abs(curv.H - 2.0).max() <= 2e-2
    assert np.abs(curv.K - 1.0).max() <= 5e-2
    assert np.abs(np.linalg.norm(curv.normal, axis=1) - 1.0).max() < 1e-12
    # exact consistency of the bundle
    np.testing.assert_allclose(curv.H, curv.principal.sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(curv.K, curv.principal.prod(axis=1), atol=1e-12)
    # B symmetric with the normal in its kernel
    assert np.abs(curv.B - curv.B.transpose(0, 2, 1)).max() < 1e-12
    assert np.abs(np.einsum("nij,nj->ni", curv.B, curv.normal)).max() < 1e-10
    assert np.abs(np.einsum("nii->n", curv.B) - curv.H).max() < 1e-12


def test_ellipse_tip_curvature():
    surf = geo.build_shape({"kind": "ellipse", "a": 2.0, "b": 1.0, "n": 1024})
    curv = geo.compute_curvature(surf)
    tip = np.argmin(np.linalg.norm(surf.vertices - [2.0, 0.0], axis=1))
    # closed form a b / (a^2 sin^2 t + b^2 cos^2 t)^{3/2} at t = 0
    assert abs(curv.kappa[tip] - 2.0) <= 1e-2


def test_refinement_convergence_2d():
    errs = []
    for n in (128, 256):
        surf = geo.build_shape({"kind": "ellipse", "a": 1.5, "b": 1.0, "n": n})
        curv = geo.compute_curvature(surf)
        theta = np.arctan2(surf.vertices[:, 1] / 1.0, surf.vertices[:, 0] / 1.5)
        exact = 1.5 / (1.5**2 * np.sin(theta) ** 2 + np.cos(theta) ** 2) ** 1.5
        errs.append(np.abs(curv.kappa - exact).max())
    assert errs[1] <= errs[0] / 2.0


def test_refinement_convergence_3d(sphere3_bundle, sphere4_bundle):
    err3 = np.abs(sphere3_bundle[1].H - 2.0).max()
    err4 = np.abs(sphere4_bundle[1].H - 2.0).max()
    assert err4 <= err3 / 2.0


def test_cotangent_mean_curvature_cross_check(sphere4_bundle):
    surf, curv, _ = sphere4_bundle
    h_cot = geo.cotangent_mean_curvature(surf)
    # pointwise agreement is limited by irregular-valence vertices
    assert np.abs(h_cot - curv.H).max() < 0.3
    assert abs(np.median(h_cot) - 2.0) < 2e-2


# -- measures ----------------------------------------------------------------


def test_circle_measure(circle256):
    m = geo.measure(circle256)
    assert abs(m.perimeter - 2 * np.pi) <= 1e-3
    assert abs(m.volume_per_component[0] - np.pi) <= 1e-3


def test_sphere_measure(sphere4):
    m = geo.measure(sphere4)
    assert abs(m.perimeter - 4 * np.pi) <= 2e-2
    assert abs(m.volume_per_component[0] - 4 * np.pi / 3) <= 1e-2


def test_two_circles_measure():
    a = geo.build_shape({"kind": "circle", "R": 1.0, "n": 128})
    pts = a.vertices + [3.0, 0.0]
    surf = geo.DiscreteSurface.from_curve_loops([a.vertices, pts])
    m = geo.measure(surf)
    assert surf.n_components == 2
    assert abs(m.perimeter - 4 * np.pi) < 2e-3
    np.testing.assert_allclose(m.volume_per_component, [np.pi, np.pi], atol=2e-3)


def test_component_volumes_positive(sphere3):
    v2 = np.concatenate([sphere3.vertices, sphere3.vertices + [3.0, 0, 0]])
    t2 = np.concatenate([sphere3.triangles,
                         sphere3.triangles + sphere3.n_vertices])
    surf = geo.DiscreteSurface.from_triangle_mesh(v2, t2)
    assert surf.n_components == 2
    assert (geo.measure(surf).volume_per_component > 0).all()


# -- UBC radius --------------------------------------------------------------


def test_ubc_sphere(sphere4_bundle):
    surf, curv, _ = sphere4_bundle
    r = geo.estimate_ubc_radius(surf, curv)
    assert abs(r - 1.0) <= 0.05


def test_ubc_ellipse():
    surf = geo.build_shape({"kind": "ellipse", "a": 2.0, "b": 1.0, "n": 512})
    curv = geo.compute_curvature(surf)
    r = geo.estimate_ubc_radius(surf, curv)
    assert abs(r - 0.5) <= 0.025  # min radius of curvature b^2/a at the tips


def test_ubc_two_spheres_gap(sphere3):
    gap = 0.2
    v2 = np.concatenate([sphere3.vertices,
                         sphere3.vertices + [2.0 + gap, 0, 0]])
    t2 = np.concatenate([sphere3.triangles,
                         sphere3.triangles + sphere3.n_vertices])
    surf = geo.DiscreteSurface.from_triangle_mesh(v2, t2)
    curv = geo.compute_curvature(surf)
    r = geo.estimate_ubc_radius(surf, curv)
    assert r <= gap / 2 + 0.02


def test_curvature_bounded_by_ubc(sphere4_bundle):
    surf, curv, _ = sphere4_bundle
    r = geo.estimate_ubc_radius(surf, curv)
    assert np.abs(curv.principal).max() <= 1.0 / r + 1e-9


# -- offsets -----------------------------------------------------------------


def test_offset_circle(circle256):
    curv = geo.compute_curvature(circle256)
    pts, ok = geo.offset_points(circle256, 0.1, curv)
    assert ok
    assert np.abs(np.linalg.norm(pts, axis=1) - 1.1).max() < 1e-6
    pts0, _ = geo.offset_points(circle256, 0.0, curv)
    np.testing.assert_array_equal(pts0, circle256.vertices)


def test_offset_sphere_inward(sphere3_bundle):
    surf, curv, _ = sphere3_bundle
    pts, ok = geo.offset_points(surf, -0.5, curv)
    assert ok
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() < 1e-3


def test_offset_beyond_reach_flagged(circle256):
    curv = geo.compute_curvature(circle256)
    pts, ok = geo.offset_points(circle256, -1.5, curv)
    assert not ok
    assert pts.shape == circle256.vertices.shape


def test_offset_jacobian_consistency(sphere4_bundle):
    # measure of the offset surface vs integral of 1 + H tau + K tau^2
    surf, curv, solver = sphere4_bundle
    tau = 0.05
    moved = surf.with_vertices(surf.vertices + tau * curv.normal)
    area = geo.measure(moved).perimeter
    predicted = float(np.sum(solver.mass *
                             (1.0 + curv.H * tau + curv.K * tau**2)))
    assert abs(area - predicted) / area < 2e-3


def test_offset_jacobian_consistency_2d(circle512_bundle):
    surf, curv, solver = circle512_bundle
    tau = 0.1
    moved = surf.with_vertices(surf.vertices + tau * curv.normal)
    length = geo.measure(moved).perimeter
    predicted = float(np.sum(solver.mass * (1.0 + curv.kappa * tau)))
    assert abs(length - predicted) / length < 1e-6


# -- file formats ------------------------------------------------------------


def test_curve_json_roundtrip(tmp_path):
    surf = geo.build_shape({"kind": "ellipse", "a": 1.3, "b": 0.7, "n": 64})
    path = tmp_path / "curve.json"
    geo.save_curve_json(surf, path)
    again = geo.load_curve_json(path)
    np.testing.assert_array_equal(surf.vertices, again.vertices)
    geo.save_curve_json(again, tmp_path / "curve2.json")
    assert (tmp_path / "curve.json").read_bytes() == \
        (tmp_path / "curve2.json").read_bytes()


def test_curve_json_format(tmp_path):
    path = tmp_path / "two.json"
    path.write_text(json.dumps([
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        [[3.0, 0.0], [3.0, 1.0], [4.0, 0.5]],
    ]))
    surf = geo.load_curve_json(path)
    assert surf.n_components == 2
    assert (geo.measure(surf).volume_per_component > 0).all()


def test_off_roundtrip(tmp_path, sphere3):
    path = tmp_path / "mesh.off"
    geo.save_off(sphere3, path)
    again = geo.load_off(path)
    np.testing.assert_array_equal(sphere3.vertices, again.vertices)
    np.testing.assert_array_equal(sphere3.triangles, again.triangles)


def test_obj_load(tmp_path, sphere3):
    path = tmp_path / "mesh.obj"
    with open(path, "w") as fh:
        for x, y, z in sphere3.vertices:
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in sphere3.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
    again = geo.load_obj(path)
    np.testing.assert_allclose(sphere3.vertices, again.vertices)


def test_off_boundary_edge_rejected(tmp_path):
    path = tmp_path / "open.off"
    path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    with pytest.raises(geo.GeometryError, match="not closed"):
        geo.load_off(path)
