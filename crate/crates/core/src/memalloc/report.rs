use std::fmt::Write as _;

use super::MemoryMap;

/// Columns of the occupancy grid.
const GRID_COLS: usize = 64;

/// Per-level allocation tables followed by a step × address occupancy
/// grid. Each grid row is one step; each column covers `peak / 64` bytes
/// and shows `#` where some live buffer touches it.
pub fn mem_report(m: &MemoryMap) -> String {
    let mut s = String::new();
    for (level, lm) in &m.levels {
        let used: usize = lm.entries.iter().map(|e| e.reserved).sum();
        let _ = writeln!(
            s,
            "level {level}: peak {} / capacity {} bytes ({} buffers, {} bytes reserved, {})",
            lm.peak,
            lm.capacity,
            lm.entries.len(),
            used,
            if lm.exact { "minimal peak" } else { "heuristic peak" }
        );
        let _ = writeln!(s, "  {:<40} {:>10} {:>10} {:>6} {:>6}", "buffer", "offset", "bytes", "start", "end");
        let mut rows: Vec<_> = lm.entries.iter().collect();
        rows.sort_by_key(|e| (e.offset, e.start, e.name.clone()));
        for e in rows {
            let _ = writeln!(s, "  {:<40} {:>10} {:>10} {:>6} {:>6}", e.name, e.offset, e.reserved, e.start, e.end);
        }
        let steps = lm.entries.iter().map(|e| e.end + 1).max().unwrap_or(0);
        if lm.peak > 0 && steps > 0 {
            let per = lm.peak.div_ceil(GRID_COLS).max(1);
            let _ = writeln!(s, "  occupancy ({per} bytes per column)");
            for step in 0..steps {
                let mut row = vec!['.'; lm.peak.div_ceil(per)];
                for e in lm.entries.iter().filter(|e| e.start <= step && step <= e.end && e.reserved > 0) {
                    for c in row.iter_mut().take((e.offset + e.reserved).div_ceil(per)).skip(e.offset / per) {
                        *c = '#';
                    }
                }
                let _ = writeln!(s, "  {step:>5} |{}| {}", row.iter().collect::<String>(), lm.high_water(step));
            }
        }
    }
    s
}
