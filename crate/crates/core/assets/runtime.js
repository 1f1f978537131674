// Worker-side loop shared by every kernel bundle.
// Expects `kernels` to be filled in by the kernel section and BUNDLE_KERNEL to name it.
const kernels = {};

function makeTransport(base, kind) {
  if (kind === "stream") {
    const ws = new WebSocket(base.replace(/^http/, "ws") + "/ws");
    const waiting = [];
    const ready = new Promise((ok, fail) => { ws.onopen = ok; ws.onerror = fail; });
    ws.onmessage = (e) => {
      const msg = JSON.parse(e.data);
      const w = waiting.shift();
      if (w) w(msg);
    };
    return {
      async send(msg, expectReply = true) {
        await ready;
        const reply = expectReply ? new Promise((ok) => waiting.push(ok)) : null;
        ws.send(JSON.stringify(msg));
        return reply;
      },
    };
  }
  let session = null;
  const paths = { hello: "hello", request_tasks: "tasks", partial: "partial", final: "final" };
  return {
    async send(msg) {
      const headers = { "content-type": "application/json" };
      if (session) headers["x-session"] = session;
      const res = await fetch(base + "/api/" + paths[msg.type], {
        method: "POST", headers, body: JSON.stringify(msg),
      });
      const reply = await res.json();
      if (reply.type === "welcome") session = String(reply.session_id);
      return reply;
    },
  };
}

async function runWorker(cfg) {
  const t = makeTransport(cfg.base, cfg.transport || "request-response");
  const batch = cfg.batch_size || 1;
  const every = cfg.checkpoint_every || 0;
  await t.send({ type: "hello", client_info: navigator.userAgent });
  for (;;) {
    const reply = await t.send({ type: "request_tasks", count: batch });
    if (reply.type === "drained") {
      await new Promise((ok) => setTimeout(ok, cfg.idle_ms || 2000));
      continue;
    }
    for (const task of reply.tasks) {
      const k = kernels[task.kernel_id];
      const p = task.payload;
      let seq = task.checkpoint ? task.checkpoint.sequence : 0;
      while (k.done(p) < k.total(p)) {
        const target = every ? Math.min(k.total(p), (Math.floor(k.done(p) / every) + 1) * every) : k.total(p);
        k.advance(p, target);
        if (k.done(p) < k.total(p)) {
          seq += 1;
          await t.send({ type: "partial", task_id: task.task_id, sequence: seq,
            progress_units: k.done(p), partial_payload: k.checkpoint(p) });
        }
      }
      await t.send({ type: "final", task_id: task.task_id, sequence: seq + 1, payload: p });
    }
  }
}

self.onmessage = (e) => runWorker(e.data);
