use std::collections::HashMap;

use proptest::prelude::*;

use super::*;

fn unit_triangle() -> Mesh {
    Mesh::new(
        vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
        vec![[0, 1, 2]],
    )
    .unwrap()
}

fn icosphere(subdivisions: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::new();
        for f in &faces {
            let mut m = [0; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                m[k] = *mid.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                    verts.len() - 1
                });
            }
            next.push([f[0], m[0], m[2]]);
            next.push([f[1], m[1], m[0]]);
            next.push([f[2], m[2], m[1]]);
            next.push([m[0], m[1], m[2]]);
        }
        faces = next;
    }
    Mesh::new(verts, faces).unwrap()
}

#[test]
fn mesh_rejects_bad_faces() {
    let v = vec![Vec3::zeros(); 3];
    assert!(Mesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
    assert!(Mesh::new(v, vec![[0, 1, 1]]).is_err());
}

#[test]
fn edges_are_unique() {
    let m = grid_mesh(3, 3, 1.0);
    let mut e = m.edges().to_vec();
    let n = e.len();
    e.dedup();
    assert_eq!(n, e.len());
    // 2x2 cells: 12 axis edges + 4 diagonals
    assert_eq!(n, 16);
    assert!(e.iter().all(|[a, b]| a < b));
}

#[test]
fn adjacency_is_symmetric() {
    let m = icosphere(1);
    let adj = m.adjacency();
    for i in 0..adj.len() {
        for &j in adj.neighbors(i) {
            assert!(adj.neighbors(j).contains(&i));
        }
    }
}

#[test]
fn planar_triangle_normal_is_up() {
    let n = vertex_normals(&unit_triangle());
    assert!(n.isolated.is_empty());
    for v in n.normals {
        assert!((v - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }
}

#[test]
fn icosphere_normals_are_nearly_radial() {
    let m = icosphere(2);
    let n = vertex_normals(&m);
    let max_angle = m
        .vertices()
        .iter()
        .zip(&n.normals)
        .map(|(p, nv)| p.normalize().dot(nv).clamp(-1.0, 1.0).acos().to_degrees())
        .fold(0.0, f64::max);
    assert!(max_angle < 5.0, "max deviation {max_angle} deg");
    for nv in &n.normals {
        assert!((nv.norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn reversed_winding_flips_normals() {
    let m = icosphere(1);
    let flipped = Mesh::new(
        m.vertices().to_vec(),
        m.faces().iter().map(|f| [f[0], f[2], f[1]]).collect(),
    )
    .unwrap();
    let a = vertex_normals(&m).normals;
    let b = vertex_normals(&flipped).normals;
    for (x, y) in a.iter().zip(&b) {
        assert!((x + y).norm() < 1e-12);
    }
}

#[test]
fn isolated_vertex_gets_fallback_normal() {
    let mut v = unit_triangle().vertices().to_vec();
    v.push(Vec3::new(5.0, 5.0, 5.0));
    let m = Mesh::new(v, vec![[0, 1, 2]]).unwrap();
    let n = vertex_normals(&m);
    assert_eq!(n.isolated, vec![3]);
    assert_eq!(n.normals[3], Vec3::new(0.0, 0.0, 1.0));
}

#[test]
fn laplacian_zero_at_neighbour_centroid() {
    let m = grid_mesh(3, 3, 1.0);
    // Interior vertex 4 of a flat grid sits at the centroid of its 6 neighbours.
    let lap = graph_laplacian(&m, m.vertices()).unwrap();
    assert!(lap[4].norm() < 1e-12);
}

#[test]
fn laplacian_of_displaced_interior_vertex() {
    let m = grid_mesh(5, 5, 0.5);
    let mut p = m.vertices().to_vec();
    let d = 0.3;
    p[12].z += d;
    let lap = graph_laplacian(&m, &p).unwrap();
    // One-ring of 12 stays in z = 0, so the mean is the flat centroid.
    assert!((lap[12] - Vec3::new(0.0, 0.0, -d)).norm() < 1e-12);
}

#[test]
fn laplacian_translation_invariant_and_constant_field_zero() {
    let m = icosphere(1);
    let shift = Vec3::new(0.3, -2.0, 7.0);
    let moved: Vec<Vec3> = m.vertices().iter().map(|v| v + shift).collect();
    let a = graph_laplacian(&m, m.vertices()).unwrap();
    let b = graph_laplacian(&m, &moved).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).norm() < 1e-12);
    }
    let constant = vec![shift; m.vertex_count()];
    assert!(graph_laplacian(&m, &constant).unwrap().iter().all(|v| v.norm() < 1e-12));
}

#[test]
fn laplacian_sums_to_zero_on_regular_closed_mesh() {
    // Octahedron: every vertex has valence 4.
    let v = vec![
        Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0),
    ];
    let f = vec![
        [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
        [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
    ];
    let m = Mesh::new(v, f).unwrap();
    let mut p = m.vertices().to_vec();
    p[0].x += 0.4;
    p[4].y -= 0.2;
    let total = graph_laplacian(&m, &p).unwrap().iter().fold(Vec3::zeros(), |s, v| s + v);
    assert!(total.norm() < 1e-12);
}

#[test]
fn laplacian_isolated_vertex_is_zero() {
    let mut v = unit_triangle().vertices().to_vec();
    v.push(Vec3::new(1.0, 1.0, 1.0));
    let m = Mesh::new(v, vec![[0, 1, 2]]).unwrap();
    assert_eq!(graph_laplacian(&m, m.vertices()).unwrap()[3], Vec3::zeros());
}

#[test]
fn knn_small_cases() {
    let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
    assert_eq!(knn(&Vec3::new(2.0, 0.0, 0.0), &pts, 1).unwrap(), vec![2]);
    assert_eq!(knn(&Vec3::new(0.6, 0.0, 0.0), &pts, 2).unwrap(), vec![1, 0]);
    // Equidistant: lower index first.
    assert_eq!(knn(&Vec3::new(0.5, 0.0, 0.0), &pts, 2).unwrap(), vec![0, 1]);
    assert!(knn(&Vec3::zeros(), &pts, 5).is_err());
}

fn brute_knn(q: &Vec3, pts: &[Vec3], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            let (a, b) = (idx[i], idx[j]);
            let (da, db) = ((pts[a] - q).norm_squared(), (pts[b] - q).norm_squared());
            if db < da || (db == da && b < a) {
                idx.swap(i, j);
            }
        }
    }
    idx.truncate(k);
    idx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn knn_matches_exhaustive_search(
        raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..120),
        q in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        kfrac in 0.0f64..1.0,
    ) {
        let pts: Vec<Vec3> = raw.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
        let k = ((pts.len() as f64) * kfrac).ceil() as usize;
        let q = Vec3::new(q.0, q.1, q.2);
        prop_assert_eq!(knn(&q, &pts, k).unwrap(), brute_knn(&q, &pts, k));
    }
}

#[test]
fn obj_minimal_and_out_of_range() {
    let p = std::path::Path::new("t.obj");
    let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", p).unwrap().mesh;
    assert_eq!((m.vertex_count(), m.face_count()), (3, 1));
    let e = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", p).unwrap_err();
    assert!(matches!(e, crate::Error::Parse { line: 4, .. }), "{e}");
    let e = parse_obj("v 0 0\n", p).unwrap_err();
    assert!(matches!(e, crate::Error::Parse { line: 1, .. }));
}

#[test]
fn obj_ignores_other_records_and_comments() {
    let text = "# header\nv 0 0 0\nvn 0 0 1\nv 1 0 0 # trailing\nv 0 1 0\nvt 0 0\nf 1/1/1 2/2/1 3/3/1\n";
    let obj = parse_obj(text, std::path::Path::new("t.obj")).unwrap();
    assert_eq!(obj.ignored_records, 2);
    assert_eq!(obj.mesh.faces(), &[[0, 1, 2]]);
}

#[test]
fn obj_writer_format_is_exact() {
    let s = write_obj(&unit_triangle());
    assert_eq!(s, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
    let m = Mesh::new(vec![Vec3::new(0.1 + 0.2, -1e-17, 1.0 / 3.0); 3], vec![]).unwrap();
    let back = parse_obj(&write_obj(&m), std::path::Path::new("x.obj")).unwrap().mesh;
    assert_eq!(back.vertices(), m.vertices());
    assert_eq!(write_obj(&Mesh::empty()), "");
}

#[test]
fn obj_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.obj");
    let m = icosphere(1);
    save_obj(&m, &path).unwrap();
    let back = load_obj(&path).unwrap();
    assert_eq!(back.faces(), m.faces());
    assert_eq!(back.vertices(), m.vertices());
    let empty = dir.path().join("e.obj");
    save_obj(&Mesh::empty(), &empty).unwrap();
    assert_eq!(load_obj(&empty).unwrap().vertex_count(), 0);
}

#[test]
fn save_obj_reports_path() {
    let e = save_obj(&unit_triangle(), "/nonexistent-dir/x.obj").unwrap_err();
    assert!(e.to_string().contains("/nonexistent-dir/x.obj"));
}
