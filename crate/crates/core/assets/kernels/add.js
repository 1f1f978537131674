// add: one unit of work, result = a + b
kernels["add"] = {
  total(p) { return 1; },
  done(p) { return "result" in p ? 1 : 0; },
  advance(p, to) {
    if (to >= 1 && !("result" in p)) p.result = p.a + p.b;
  },
  checkpoint(p) { return "result" in p ? { result: p.result } : {}; },
};
