use crate::error::{Error, Result};

/// Golden-ratio icosahedron, fixed vertex order.
fn base_vertices() -> Vec<[f64; 3]> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    raw.iter().map(|&v| normalize(v)).collect()
}

/// Counter-clockwise seen from outside.
const BASE_FACES: [[u32; 3]; 20] = [
    [0, 11, 5],
    [0, 5, 1],
    [0, 1, 7],
    [0, 7, 10],
    [0, 10, 11],
    [1, 5, 9],
    [5, 11, 4],
    [11, 10, 2],
    [10, 7, 6],
    [7, 1, 8],
    [3, 9, 4],
    [3, 4, 2],
    [3, 2, 6],
    [3, 6, 8],
    [3, 8, 9],
    [4, 9, 5],
    [2, 4, 11],
    [6, 2, 10],
    [8, 6, 7],
    [9, 8, 1],
];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Unit icosphere of a given subdivision order.
///
/// Construction is fully deterministic: each subdivision creates one midpoint
/// per undirected edge, numbering the new vertices in sorted `(min, max)` edge
/// order after all existing ones, and splits face `f` into faces
/// `4f..4f+4` as `[a, ab, ca]`, `[ab, b, bc]`, `[ca, bc, c]`, `[ab, bc, ca]`.
/// Vertices of order `q` are therefore a prefix of the vertices of any
/// higher order.
#[derive(Clone, Debug, PartialEq)]
pub struct IcosphereMesh {
    pub order: u32,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl IcosphereMesh {
    pub fn vertex_count_for(order: u32) -> usize {
        10 * 4usize.pow(order) + 2
    }

    pub fn face_count_for(order: u32) -> usize {
        20 * 4usize.pow(order)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Little-endian bytes of all vertex coordinates, for determinism checks.
    pub fn vertex_bytes(&self) -> Vec<u8> {
        self.vertices
            .iter()
            .flat_map(|v| v.iter().flat_map(|c| c.to_le_bytes()))
            .collect()
    }
}

/// Largest order whose vertex indices still fit comfortably in `u32`.
pub const MAX_ORDER: u32 = 12;

/// Vertices of order `order` plus the face list of every level `0..=order`.
pub(crate) fn build_levels(order: u32) -> Result<(Vec<[f64; 3]>, Vec<Vec<[u32; 3]>>)> {
    if order > MAX_ORDER {
        return Err(Error::Invalid(format!(
            "icosphere order {order} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    let mut vertices = base_vertices();
    let mut levels = vec![BASE_FACES.to_vec()];
    for _ in 0..order {
        let faces = levels.last().unwrap();
        let mut edges: Vec<(u32, u32)> = faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(x, y)| (x.min(y), x.max(y)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let first_new = vertices.len() as u32;
        for &(x, y) in &edges {
            let (p, q) = (vertices[x as usize], vertices[y as usize]);
            vertices.push(normalize([
                (p[0] + q[0]) * 0.5,
                (p[1] + q[1]) * 0.5,
                (p[2] + q[2]) * 0.5,
            ]));
        }
        let mid = |x: u32, y: u32| -> u32 {
            let key = (x.min(y), x.max(y));
            first_new + edges.binary_search(&key).expect("edge recorded") as u32
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in faces {
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        levels.push(next);
    }
    Ok((vertices, levels))
}

/// Build the canonical icosphere of the given order.
pub fn build_icosphere(order: u32) -> Result<IcosphereMesh> {
    let (vertices, mut levels) = build_levels(order)?;
    Ok(IcosphereMesh {
        order,
        vertices,
        faces: levels.pop().unwrap(),
    })
}
