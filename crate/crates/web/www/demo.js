import init, { example1, guided_samples, maze_scene } from "./pkg/hiplan_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(id, f) {
  const out = $(id);
  try {
    const v = f();
    out.classList.remove("err");
    return v;
  } catch (e) {
    out.textContent = String(e.message ?? e);
    out.classList.add("err");
    return null;
  }
}

function updateToy() {
  const v = show("toy-out", () => JSON.parse(example1(num("n1"), num("n2"), num("g1"), num("g2"))));
  if (!v) return;
  $("toy-out").textContent =
    `diffuser: P(b1) = ${v.p_b1.toFixed(3)}, picks ${v.diffuser}\n` +
    `Q-learning picks ${v.q}\n` +
    `diffuser switches to b1 once n1/n2 > ${v.flip_ratio.toFixed(3)}`;
}

function updateMixture() {
  $("omega-val").textContent = $("omega").value;
  const v = show("mix-out", () =>
    JSON.parse(guided_samples(num("n1"), num("n2"), 1.0, num("omega"), num("msteps"), 4000, 60, 1n)));
  if (!v) return;
  const c = $("hist"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const peak = Math.max(...v.counts, 1), w = c.width / v.counts.length;
  ctx.fillStyle = "#4a7";
  v.counts.forEach((n, i) => {
    const h = (n / peak) * (c.height - 10);
    ctx.fillRect(i * w + 1, c.height - h, w - 2, h);
  });
  $("mix-out").textContent = `sampled b1 share ${v.frac_b1.toFixed(3)} (data ${v.data_frac_b1.toFixed(3)})`;
}

function updateMaze() {
  const v = show("maze-out", () =>
    JSON.parse(maze_scene($("maze").value, 40, num("gamma"), $("behavior").value, BigInt(num("seed")))));
  if (!v) return;
  const c = $("map"), ctx = c.getContext("2d");
  const [x0, y0] = v.bounds.min, [x1, y1] = v.bounds.max;
  const px = (p) => [((p[0] - x0) / (x1 - x0)) * c.width, c.height - ((p[1] - y0) / (y1 - y0)) * c.height];
  const flat = v.values.flat(), lo = Math.min(...flat), hi = Math.max(...flat);
  const n = v.values.length, cw = c.width / n, ch = c.height / n;
  v.values.forEach((row, r) => row.forEach((val, k) => {
    const t = hi > lo ? (val - lo) / (hi - lo) : 0;
    ctx.fillStyle = `rgb(${Math.round(40 + 200 * t)}, ${Math.round(60 + 120 * t)}, ${Math.round(160 - 120 * t)})`;
    ctx.fillRect(k * cw, c.height - (r + 1) * ch, cw + 1, ch + 1);
  }));
  ctx.strokeStyle = "#000";
  ctx.lineWidth = 4;
  for (const [a, b] of v.walls) {
    ctx.beginPath(); ctx.moveTo(...px(a)); ctx.lineTo(...px(b)); ctx.stroke();
  }
  ctx.strokeStyle = "#fff";
  ctx.lineWidth = 2;
  ctx.beginPath();
  v.path.forEach((p, i) => (i ? ctx.lineTo(...px(p)) : ctx.moveTo(...px(p))));
  ctx.stroke();
  const [gx, gy] = px(v.goal);
  ctx.beginPath();
  ctx.arc(gx, gy, (v.goal_radius / (x1 - x0)) * c.width, 0, 2 * Math.PI);
  ctx.stroke();
  $("maze-out").textContent = `${v.path.length} steps, ${v.succeeded ? "reached" : "missed"} the goal`;
}

await init();
for (const id of ["n1", "n2", "g1", "g2"]) $(id).addEventListener("input", () => { updateToy(); updateMixture(); });
for (const id of ["omega", "msteps"]) $(id).addEventListener("input", updateMixture);
for (const id of ["maze", "behavior", "gamma", "seed"]) $(id).addEventListener("change", updateMaze);
updateToy();
updateMixture();
updateMaze();
