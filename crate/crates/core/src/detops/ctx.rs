/// Execution context for operators: carries the worker count.
///
/// The partition of work is a pure function of `(unit count, workers)`, so
/// results cannot depend on how many CPUs the host actually has. Workers only
/// ever split order-insensitive units (output rows or elements); each unit is
/// computed by exactly one worker with serial inner loops.
#[derive(Debug, Clone, Copy)]
pub struct OpCtx {
    workers: usize,
}

impl OpCtx {
    /// Single-threaded context.
    pub fn serial() -> Self {
        OpCtx { workers: 1 }
    }

    /// Context with a fixed worker count (clamped to at least 1).
    pub fn with_workers(workers: usize) -> Self {
        OpCtx { workers: workers.max(1) }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Splits `out` (viewed as `units` blocks of `unit_len` floats) into at
    /// most `workers` contiguous runs and invokes `kernel(first_unit, run)`
    /// on each, in parallel when workers > 1. Every unit belongs to exactly
    /// one run, so kernels never race, and the run boundaries depend only on
    /// the arguments.
    pub(crate) fn run_partitioned<F>(&self, units: usize, unit_len: usize, out: &mut [f32], kernel: F)
    where
        F: Fn(usize, &mut [f32]) + Sync,
    {
        debug_assert_eq!(out.len(), units * unit_len);
        let w = self.workers.min(units.max(1));
        if w <= 1 {
            kernel(0, out);
            return;
        }
        let per = units.div_ceil(w);
        std::thread::scope(|scope| {
            let kernel = &kernel;
            let mut rest = out;
            let mut first = 0usize;
            while first < units {
                let take = per.min(units - first);
                let (chunk, tail) = rest.split_at_mut(take * unit_len);
                rest = tail;
                let base = first;
                scope.spawn(move || kernel(base, chunk));
                first += take;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_everything_once() {
        for workers in 1..6 {
            for units in 1..40 {
                let ctx = OpCtx::with_workers(workers);
                let mut out = vec![0.0f32; units * 3];
                ctx.run_partitioned(units, 3, &mut out, |first, chunk| {
                    for (k, v) in chunk.iter_mut().enumerate() {
                        let unit = first + k / 3;
                        *v += (unit * 3 + k % 3) as f32;
                    }
                });
                let want: Vec<f32> = (0..units * 3).map(|i| i as f32).collect();
                assert_eq!(out, want, "workers={workers} units={units}");
            }
        }
    }
}
