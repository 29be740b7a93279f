use std::collections::VecDeque;

use cac_core::scoring::Connectivity;
use cac_core::volume::MaskVolume;

/// Breadth-first flood fill over explicit neighbour enumeration.
pub fn flood_fill(mask: &MaskVolume, conn: Connectivity) -> Vec<Vec<usize>> {
    let d = mask.dims();
    let on = mask.labels();
    let mut seen = vec![false; on.len()];
    let mut comps = Vec::new();
    for start in 0..on.len() {
        if on[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (s, r, c) = d.coords(i);
            for j in 0..on.len() {
                if on[j] == 0 || seen[j] {
                    continue;
                }
                let (s2, r2, c2) = d.coords(j);
                let near = s.abs_diff(s2) <= 1 && r.abs_diff(r2) <= 1 && c.abs_diff(c2) <= 1;
                let allowed = match conn {
                    Connectivity::Volume26 => true,
                    Connectivity::Slice8 => s == s2,
                };
                if near && allowed {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}
