use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{DeviceConfig, DeviceKind, RuntimeError, VirtualPtr};

/// A computation the device can run over f32 buffers.
pub trait DeviceKernel: Send + Sync {
    fn name(&self) -> &str;
    fn arity(&self) -> usize;
    /// Element count argument `i` spans.
    fn arg_len(&self, i: usize) -> usize;
    /// Indices of arguments written by the kernel.
    fn outputs(&self) -> Vec<usize>;
    fn work_elements(&self) -> u64;
    fn run(&self, args: &mut [Vec<f32>]);
}

type KernelFn = dyn Fn(&mut [Vec<f32>]) + Send + Sync;

/// A kernel built from a closure.
pub struct FnKernel {
    name: String,
    lens: Vec<usize>,
    outputs: Vec<usize>,
    work: u64,
    body: Box<KernelFn>,
}

impl FnKernel {
    pub fn new(
        name: impl Into<String>,
        lens: Vec<usize>,
        outputs: Vec<usize>,
        body: impl Fn(&mut [Vec<f32>]) + Send + Sync + 'static,
    ) -> Self {
        let work = outputs.iter().map(|&i| lens[i] as u64).sum();
        FnKernel {
            name: name.into(),
            lens,
            outputs,
            work,
            body: Box::new(body),
        }
    }
}

impl DeviceKernel for FnKernel {
    fn name(&self) -> &str {
        &self.name
    }
    fn arity(&self) -> usize {
        self.lens.len()
    }
    fn arg_len(&self, i: usize) -> usize {
        self.lens[i]
    }
    fn outputs(&self) -> Vec<usize> {
        self.outputs.clone()
    }
    fn work_elements(&self) -> u64 {
        self.work
    }
    fn run(&self, args: &mut [Vec<f32>]) {
        (self.body)(args)
    }
}

/// Host memory a device-to-host copy lands in. Contents are valid after
/// the queue has been synchronized.
pub type HostBuffer = Arc<Mutex<Vec<u8>>>;

pub fn host_buffer(bytes: usize) -> HostBuffer {
    Arc::new(Mutex::new(vec![0; bytes]))
}

/// Reads a host buffer as f32 values.
pub fn read_f32(buf: &HostBuffer) -> Vec<f32> {
    bytes_to_f32(&buf.lock().expect("host buffer poisoned"))
}

pub fn f32_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[derive(Clone)]
pub enum Command {
    Malloc { reference: u32, bytes: u64 },
    Free { reference: u32 },
    CopyH2D { dst: VirtualPtr, data: Arc<Vec<u8>> },
    CopyD2H { dst: HostBuffer, dst_offset: usize, src: VirtualPtr, bytes: usize },
    Launch { kernel: Arc<dyn DeviceKernel>, args: Vec<VirtualPtr> },
    Barrier,
}

impl fmt::Debug for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Malloc { reference, bytes } => write!(f, "Malloc({reference}, {bytes})"),
            Command::Free { reference } => write!(f, "Free({reference})"),
            Command::CopyH2D { dst, data } => write!(f, "CopyH2D({dst:?}, {})", data.len()),
            Command::CopyD2H { src, bytes, .. } => write!(f, "CopyD2H({src:?}, {bytes})"),
            Command::Launch { kernel, args } => write!(f, "Launch({}, {args:?})", kernel.name()),
            Command::Barrier => write!(f, "Barrier"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_ops: u64,
    pub d2h_ops: u64,
    pub packed_transfers: u64,
    pub launches: u64,
    pub sim_time_us: f64,
}

impl TransferStats {
    pub fn total_bytes(&self) -> u64 {
        self.h2d_bytes + self.d2h_bytes
    }

    /// Counter increase from `earlier` to `self`.
    pub fn since(&self, earlier: &TransferStats) -> TransferStats {
        TransferStats {
            h2d_bytes: self.h2d_bytes - earlier.h2d_bytes,
            d2h_bytes: self.d2h_bytes - earlier.d2h_bytes,
            h2d_ops: self.h2d_ops - earlier.h2d_ops,
            d2h_ops: self.d2h_ops - earlier.d2h_ops,
            packed_transfers: self.packed_transfers - earlier.packed_transfers,
            launches: self.launches - earlier.launches,
            sim_time_us: self.sim_time_us - earlier.sim_time_us,
        }
    }
}

/// Executes commands against real backing storage.
#[derive(Default)]
struct DeviceState {
    allocs: HashMap<u32, Vec<u8>>,
    freed: HashSet<u32>,
    error: Option<RuntimeError>,
}

impl DeviceState {
    fn resolve(&self, p: VirtualPtr) -> Result<&Vec<u8>, RuntimeError> {
        let r = p.reference();
        match self.allocs.get(&r) {
            Some(b) => Ok(b),
            None if self.freed.contains(&r) => Err(RuntimeError::UseAfterFree(r)),
            None => Err(RuntimeError::UnknownRef(r)),
        }
    }

    fn range(&self, p: VirtualPtr, len: usize) -> Result<std::ops::Range<usize>, RuntimeError> {
        let size = self.resolve(p)?.len();
        let start = p.offset() as usize;
        if start + len > size {
            return Err(RuntimeError::OutOfBounds {
                reference: p.reference(),
                offset: p.offset() as u64,
                len: len as u64,
                size: size as u64,
            });
        }
        Ok(start..start + len)
    }

    fn exec(&mut self, cmd: Command) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.try_exec(cmd) {
            self.error = Some(e);
        }
    }

    fn try_exec(&mut self, cmd: Command) -> Result<(), RuntimeError> {
        match cmd {
            Command::Malloc { reference, bytes } => {
                self.allocs.insert(reference, vec![0; bytes as usize]);
            }
            Command::Free { reference } => {
                if self.allocs.remove(&reference).is_none() {
                    return Err(RuntimeError::UnknownRef(reference));
                }
                self.freed.insert(reference);
            }
            Command::CopyH2D { dst, data } => {
                let r = self.range(dst, data.len())?;
                self.allocs.get_mut(&dst.reference()).expect("resolved")[r].copy_from_slice(&data);
            }
            Command::CopyD2H {
                dst,
                dst_offset,
                src,
                bytes,
            } => {
                let r = self.range(src, bytes)?;
                let mut host = dst.lock().expect("host buffer poisoned");
                host[dst_offset..dst_offset + bytes].copy_from_slice(&self.allocs[&src.reference()][r]);
            }
            Command::Launch { kernel, args } => {
                let mut ranges = Vec::with_capacity(args.len());
                for (i, &p) in args.iter().enumerate() {
                    ranges.push(self.range(p, kernel.arg_len(i) * 4)?);
                }
                let mut bufs: Vec<Vec<f32>> = args
                    .iter()
                    .zip(&ranges)
                    .map(|(p, r)| bytes_to_f32(&self.allocs[&p.reference()][r.clone()]))
                    .collect();
                kernel.run(&mut bufs);
                for i in kernel.outputs() {
                    let dst = self.allocs.get_mut(&args[i].reference()).expect("resolved");
                    dst[ranges[i].clone()].copy_from_slice(&f32_to_bytes(&bufs[i]));
                }
            }
            Command::Barrier => {}
        }
        Ok(())
    }
}

enum Msg {
    Run(Command),
    Sync(Sender<(Option<RuntimeError>, usize)>),
    Shutdown,
}

fn worker(rx: Receiver<Msg>) {
    let mut state = DeviceState::default();
    for msg in rx {
        match msg {
            Msg::Run(cmd) => state.exec(cmd),
            Msg::Sync(reply) => {
                let _ = reply.send((state.error.take(), state.allocs.len()));
            }
            Msg::Shutdown => break,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    H2D,
    D2H,
}

/// Copies not yet separated by a launch, barrier or direction change.
#[derive(Debug, Default)]
struct CopyRun {
    direction: Option<Direction>,
    count: u64,
    bytes: u64,
}

enum Backend {
    Inline(DeviceState),
    Worker {
        tx: Sender<Msg>,
        handle: Option<JoinHandle<()>>,
    },
}

/// FIFO of device commands with a simulated clock.
///
/// Errors raised while executing a command are held until the next
/// [`CommandQueue::synchronize`]; commands after a failing one are skipped.
pub struct CommandQueue {
    cfg: DeviceConfig,
    backend: Backend,
    next_ref: u64,
    stats: Arc<Mutex<TransferStats>>,
    run: CopyRun,
    live: usize,
}

impl CommandQueue {
    pub fn new(cfg: DeviceConfig) -> Self {
        let backend = match cfg.kind {
            DeviceKind::Host => Backend::Inline(DeviceState::default()),
            DeviceKind::SimAccel => {
                let (tx, rx) = mpsc::channel();
                let handle = std::thread::spawn(move || worker(rx));
                Backend::Worker {
                    tx,
                    handle: Some(handle),
                }
            }
        };
        CommandQueue {
            cfg,
            backend,
            next_ref: 1,
            stats: Arc::new(Mutex::new(TransferStats::default())),
            run: CopyRun::default(),
            live: 0,
        }
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn kind(&self) -> DeviceKind {
        self.cfg.kind
    }

    fn is_host(&self) -> bool {
        self.cfg.kind == DeviceKind::Host
    }

    fn submit(&mut self, cmd: Command) {
        match &mut self.backend {
            Backend::Inline(state) => state.exec(cmd),
            Backend::Worker { tx, .. } => tx.send(Msg::Run(cmd)).expect("queue worker exited"),
        }
    }

    fn charge(&self, f: impl FnOnce(&mut TransferStats)) {
        f(&mut self.stats.lock().expect("stats poisoned"))
    }

    /// Charges the open copy run to the clock.
    fn close_run(&mut self) {
        let run = std::mem::take(&mut self.run);
        if run.count == 0 || self.is_host() {
            return;
        }
        let cfg = &self.cfg;
        let latency = run.count as f64 * cfg.launch_latency_us;
        let packed = cfg.packed_overhead_us + run.bytes as f64 / cfg.copy_bandwidth_bytes_per_us;
        self.charge(|s| {
            if cfg.coalesce && run.bytes >= cfg.pack_threshold_bytes && packed < latency {
                s.packed_transfers += 1;
                s.sim_time_us += packed;
            } else {
                s.sim_time_us += latency;
            }
        });
    }

    fn add_copy(&mut self, dir: Direction, bytes: u64) {
        if self.is_host() {
            return;
        }
        if self.run.direction.is_some_and(|d| d != dir) {
            self.close_run();
        }
        self.run.direction = Some(dir);
        self.run.count += 1;
        self.run.bytes += bytes;
        self.charge(|s| match dir {
            Direction::H2D => {
                s.h2d_bytes += bytes;
                s.h2d_ops += 1;
            }
            Direction::D2H => {
                s.d2h_bytes += bytes;
                s.d2h_ops += 1;
            }
        });
    }

    /// Reserves a reference and enqueues the allocation. Storage exists once
    /// the command executes.
    pub fn malloc_async(&mut self, bytes: u64) -> Result<VirtualPtr, RuntimeError> {
        if bytes == 0 || bytes > u32::MAX as u64 {
            return Err(RuntimeError::BadSize(bytes));
        }
        if self.next_ref > u32::MAX as u64 {
            return Err(RuntimeError::OutOfRefs);
        }
        let reference = self.next_ref as u32;
        self.next_ref += 1;
        self.submit(Command::Malloc { reference, bytes });
        Ok(VirtualPtr::from_parts(reference, 0))
    }

    /// Frees a whole allocation.
    pub fn free_async(&mut self, p: VirtualPtr) -> Result<(), RuntimeError> {
        if p.offset() != 0 {
            return Err(RuntimeError::PartialFree(p.raw()));
        }
        self.submit(Command::Free {
            reference: p.reference(),
        });
        Ok(())
    }

    /// Copies host bytes to the device. The bytes are captured at enqueue.
    pub fn memcpy_h2d(&mut self, dst: VirtualPtr, src: &[u8]) {
        if src.is_empty() {
            return;
        }
        self.add_copy(Direction::H2D, src.len() as u64);
        self.submit(Command::CopyH2D {
            dst,
            data: Arc::new(src.to_vec()),
        });
    }

    pub fn upload_f32(&mut self, dst: VirtualPtr, src: &[f32]) {
        self.memcpy_h2d(dst, &f32_to_bytes(src));
    }

    /// Copies device bytes into `dst[dst_offset..]`.
    pub fn memcpy_d2h(&mut self, dst: &HostBuffer, dst_offset: usize, src: VirtualPtr, bytes: usize) {
        if bytes == 0 {
            return;
        }
        assert!(
            dst_offset + bytes <= dst.lock().expect("host buffer poisoned").len(),
            "host destination too small"
        );
        self.add_copy(Direction::D2H, bytes as u64);
        self.submit(Command::CopyD2H {
            dst: dst.clone(),
            dst_offset,
            src,
            bytes,
        });
    }

    /// Enqueues a download of `len` f32 values into a fresh host buffer.
    pub fn download_f32(&mut self, src: VirtualPtr, len: usize) -> HostBuffer {
        let buf = host_buffer(len * 4);
        self.memcpy_d2h(&buf, 0, src, len * 4);
        buf
    }

    pub fn launch_async(
        &mut self,
        kernel: Arc<dyn DeviceKernel>,
        args: &[VirtualPtr],
    ) -> Result<(), RuntimeError> {
        if args.len() != kernel.arity() {
            return Err(RuntimeError::Arity {
                kernel: kernel.name().to_string(),
                expected: kernel.arity(),
                got: args.len(),
            });
        }
        self.close_run();
        if !self.is_host() {
            let cost = self.cfg.launch_latency_us + kernel.work_elements() as f64 * self.cfg.per_element_us;
            self.charge(|s| {
                s.launches += 1;
                s.sim_time_us += cost;
            });
        }
        self.submit(Command::Launch {
            kernel,
            args: args.to_vec(),
        });
        Ok(())
    }

    pub fn barrier(&mut self) {
        self.close_run();
        self.submit(Command::Barrier);
    }

    /// Waits for every enqueued command and returns the first deferred error.
    pub fn synchronize(&mut self) -> Result<(), RuntimeError> {
        self.close_run();
        let (err, live) = match &mut self.backend {
            Backend::Inline(state) => (state.error.take(), state.allocs.len()),
            Backend::Worker { tx, .. } => {
                let (rtx, rrx) = mpsc::channel();
                tx.send(Msg::Sync(rtx)).expect("queue worker exited");
                rrx.recv().expect("queue worker exited")
            }
        };
        self.live = live;
        err.map_or(Ok(()), Err)
    }

    /// Live allocations as of the last synchronize.
    pub fn live_allocations(&self) -> usize {
        self.live
    }

    pub fn stats(&self) -> TransferStats {
        *self.stats.lock().expect("stats poisoned")
    }

    /// Shared handle for reading counters from another thread.
    pub fn stats_handle(&self) -> Arc<Mutex<TransferStats>> {
        self.stats.clone()
    }

    #[doc(hidden)]
    pub fn skip_refs(&mut self, n: u64) {
        self.next_ref += n;
    }
}

impl Drop for CommandQueue {
    fn drop(&mut self) {
        if let Backend::Worker { tx, handle } = &mut self.backend {
            let _ = tx.send(Msg::Shutdown);
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl fmt::Debug for CommandQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommandQueue")
            .field("kind", &self.cfg.kind)
            .field("stats", &self.stats())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_kernel(n: usize) -> Arc<dyn DeviceKernel> {
        Arc::new(FnKernel::new("relu", vec![n, n], vec![1], |a| {
            let y: Vec<f32> = a[0].iter().map(|v| v.max(0.0)).collect();
            a[1] = y;
        }))
    }

    #[test]
    fn packed_and_latency_paths() {
        let mut q = CommandQueue::new(DeviceConfig::sim());
        let p = q.malloc_async(100 * 1024).unwrap();
        assert_eq!(p.raw(), 0x0000_0001_0000_0000);
        let chunk = vec![7u8; 1024];
        for i in 0..100 {
            q.memcpy_h2d(p.checked_add(i * 1024).unwrap(), &chunk);
        }
        q.synchronize().unwrap();
        let s = q.stats();
        assert_eq!((s.h2d_bytes, s.packed_transfers, s.h2d_ops), (102400, 1, 100));
        assert_eq!(s.sim_time_us, 32.8);

        let mut q = CommandQueue::new(DeviceConfig::sim());
        let p = q.malloc_async(2048).unwrap();
        q.memcpy_h2d(p, &chunk);
        q.memcpy_h2d(p.checked_add(1024).unwrap(), &chunk);
        q.memcpy_h2d(p, &[]);
        q.synchronize().unwrap();
        let s = q.stats();
        assert_eq!((s.sim_time_us, s.packed_transfers, s.h2d_ops), (10.0, 0, 2));
    }

    #[test]
    fn launch_round_trip_and_fifo() {
        let mut q = CommandQueue::new(DeviceConfig::sim());
        let a = q.malloc_async(12).unwrap();
        let b = q.malloc_async(12).unwrap();
        q.upload_f32(a, &[-1.0, 0.5, 2.0]);
        q.launch_async(relu_kernel(3), &[a, b]).unwrap();
        q.launch_async(relu_kernel(3), &[b, a]).unwrap();
        let out = q.download_f32(a, 3);
        q.synchronize().unwrap();
        assert_eq!(read_f32(&out), vec![0.0, 0.5, 2.0]);
        assert!(matches!(
            q.launch_async(relu_kernel(3), &[a]),
            Err(RuntimeError::Arity { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn deferred_errors() {
        let mut q = CommandQueue::new(DeviceConfig::sim());
        q.synchronize().unwrap();
        let a = q.malloc_async(12).unwrap();
        let b = q.malloc_async(12).unwrap();
        q.free_async(a).unwrap();
        q.launch_async(relu_kernel(3), &[a, b]).unwrap();
        assert_eq!(q.synchronize(), Err(RuntimeError::UseAfterFree(1)));
        q.synchronize().unwrap();
        q.free_async(b).unwrap();
        q.free_async(b).unwrap();
        assert_eq!(q.synchronize(), Err(RuntimeError::UnknownRef(2)));
        assert_eq!(q.live_allocations(), 0);
        let c = q.malloc_async(4).unwrap();
        q.upload_f32(c.checked_add(4).unwrap(), &[1.0]);
        assert!(matches!(q.synchronize(), Err(RuntimeError::OutOfBounds { .. })));
        assert!(matches!(q.free_async(c.checked_add(1).unwrap()), Err(RuntimeError::PartialFree(_))));
        q.skip_refs(u32::MAX as u64);
        assert_eq!(q.malloc_async(4), Err(RuntimeError::OutOfRefs));
    }

    #[test]
    fn host_queue_is_free_of_charge() {
        let mut q = CommandQueue::new(DeviceConfig::host());
        let a = q.malloc_async(8).unwrap();
        q.upload_f32(a, &[1.0, -2.0]);
        q.launch_async(relu_kernel(1), &[a, a.checked_add(4).unwrap()]).unwrap();
        let out = q.download_f32(a, 2);
        q.synchronize().unwrap();
        assert_eq!(read_f32(&out), vec![1.0, 1.0]);
        assert_eq!(q.stats(), TransferStats::default());
    }

    #[test]
    fn queues_have_independent_clocks() {
        let mut a = CommandQueue::new(DeviceConfig::sim());
        let b = CommandQueue::new(DeviceConfig::sim());
        let p = a.malloc_async(4).unwrap();
        a.upload_f32(p, &[1.0]);
        a.synchronize().unwrap();
        assert_eq!(a.stats().sim_time_us, 5.0);
        assert_eq!(b.stats(), TransferStats::default());
    }
}
