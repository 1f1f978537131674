// mandelbrot: escape counts for a row-major run of pixels
function escape(cr, ci, maxIter) {
  let zr = 0, zi = 0;
  for (let n = 1; n <= maxIter; n++) {
    const nzr = zr * zr - zi * zi + cr;
    zi = 2 * zr * zi + ci;
    zr = nzr;
    if (zr * zr + zi * zi > 4.0) return n;
  }
  return maxIter;
}

kernels["mandelbrot"] = {
  total(p) { return p.pixel_count; },
  done(p) { return p.done_pixels; },
  advance(p, to) {
    to = Math.min(to, p.pixel_count);
    for (let k = p.done_pixels; k < to; k++) {
      const g = p.start_pixel + k;
      const col = g % p.grid_width, row = Math.floor(g / p.grid_width);
      p.counts.push(escape(p.x0 + col * p.pixel_step, p.y0 + row * p.pixel_step, p.max_iter));
    }
    p.done_pixels = Math.max(p.done_pixels, to);
  },
  checkpoint(p) { return { counts: p.counts, done_pixels: p.done_pixels }; },
};
