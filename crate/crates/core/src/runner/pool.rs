use std::sync::mpsc;
use std::sync::Mutex;

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `work` over `items` on `workers` threads. Results reach `sink` on the
/// calling thread one at a time, so it can own the single log writer.
pub fn run_pool<I, R, W, S>(items: Vec<I>, workers: usize, work: W, mut sink: S)
where
    I: Send,
    R: Send,
    W: Fn(I) -> R + Sync,
    S: FnMut(R),
{
    if items.is_empty() {
        return;
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        items.into_iter().for_each(|i| sink(work(i)));
        return;
    }
    let queue = Mutex::new(items.into_iter());
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (queue, work) = (&queue, &work);
            s.spawn(move || loop {
                let next = queue.lock().expect("work queue poisoned").next();
                match next {
                    Some(item) => {
                        if tx.send(work(item)).is_err() {
                            break;
                        }
                    }
                    None => break,
                }
            });
        }
        drop(tx);
        for r in rx {
            sink(r);
        }
    });
}
