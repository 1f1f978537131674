// monte-carlo: counter-based SplitMix64 stream, iteration j reads draws 2j and 2j+1
const MASK = (1n << 64n) - 1n;
const GAMMA = 0x9e3779b97f4a7c15n;

function mix(z) {
  z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK;
  z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK;
  return z ^ (z >> 31n);
}

function draw(seed, i) {
  const bits = mix((BigInt(seed) + (BigInt(i) + 1n) * GAMMA) & MASK);
  return Number(bits >> 11n) * 2 ** -53;
}

kernels["monte-carlo"] = {
  total(p) { return p.iterations; },
  done(p) { return p.done_iterations; },
  advance(p, to) {
    to = Math.min(to, p.iterations);
    for (let j = p.done_iterations; j < to; j++) {
      const x = draw(p.seed, 2 * j);
      const y = draw(p.seed, 2 * j + 1);
      if (x * x + y * y <= 1.0) p.hits++;
    }
    p.done_iterations = Math.max(p.done_iterations, to);
  },
  checkpoint(p) { return { hits: p.hits, done_iterations: p.done_iterations }; },
};
