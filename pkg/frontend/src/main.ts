/** Application wiring: scene picker, 3D view, 2D inset, request panel. */

import { ApiClient, ApiError } from './api.js';
import { ImageInset } from './inset.js';
import { SceneView } from './scene.js';
import { ViewerStore } from './state.js';
import type { GraspRecord } from './types.js';

const BASE_URL = (window as { FLEXLOG_API?: string }).FLEXLOG_API ?? 'http://127.0.0.1:8731';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function formatGrasp(g: GraspRecord, rank: number): string {
  const [x, y, z] = g.t.map((v) => v.toFixed(3));
  return `#${rank + 1}  score ${g.score.toFixed(2)}  w ${(g.width * 100).toFixed(1)}cm  at (${x}, ${y}, ${z})`;
}

async function start(): Promise<void> {
  const api = new ApiClient(BASE_URL);
  const store = new ViewerStore();
  const view = new SceneView(el<HTMLCanvasElement>('view3d'));
  const banner = el<HTMLDivElement>('banner');
  const list = el<HTMLUListElement>('grasp-list');
  const sceneSelect = el<HTMLSelectElement>('scene-select');
  const kSlider = el<HTMLInputElement>('k-slider');
  const kValue = el<HTMLSpanElement>('k-value');
  const modeSelect = el<HTMLSelectElement>('mode-select');
  const gridButton = el<HTMLButtonElement>('grid-button');

  const inset = new ImageInset(el<HTMLCanvasElement>('inset'), (pick) => {
    const mode = pick.kind === 'bbox' ? 'bbox' : 'click';
    store.setMode(mode);
    modeSelect.value = mode;
    void request(pick.kind === 'click'
      ? { pixel: pick.pixel }
      : { bbox: pick.bbox });
  });

  store.subscribe((s) => {
    banner.textContent = s.banner ?? (s.busy ? 'detecting…' : '');
    banner.className = s.banner ? 'banner error' : 'banner';
    view.setGrasps(s.grasps);
    list.replaceChildren(
      ...s.grasps.map((g, i) => {
        const item = document.createElement('li');
        item.textContent = formatGrasp(g, i);
        if (i === 0) item.classList.add('top');
        return item;
      }),
    );
    kValue.textContent = String(s.k);
  });

  async function request(target: { pixel?: [number, number]; bbox?: [number, number, number, number] }): Promise<void> {
    const s = store.get();
    if (!s.sceneId) return;
    const token = store.beginRequest();
    try {
      const response = await api.requestGrasps(s.sceneId, {
        mode: s.mode, k: s.k, radius: s.radius, ...target,
      });
      store.applyResponse(token, response);
    } catch (err) {
      if (err instanceof ApiError) {
        store.applyFailure(token, err.status, err.message);
      } else {
        store.applyFailure(token, 0, `service unreachable: ${String(err)}`);
      }
    }
  }

  async function loadScene(sceneId: string): Promise<void> {
    store.selectScene(sceneId);
    try {
      const payload = await api.fetchCloud(sceneId);
      if (payload.count === 0) {
        banner.textContent = 'scene has no points';
        return;
      }
      view.setCloud(payload);
      await inset.load(api.imageUrl(sceneId));
    } catch (err) {
      banner.textContent = `failed to load scene: ${String(err)}`;
      banner.className = 'banner error';
    }
  }

  kSlider.addEventListener('input', () => {
    store.setK(Number(kSlider.value));
    kValue.textContent = kSlider.value;
  });
  modeSelect.addEventListener('change', () => {
    store.setMode(modeSelect.value as 'click' | 'bbox' | 'grid');
  });
  gridButton.addEventListener('click', () => {
    store.setMode('grid');
    modeSelect.value = 'grid';
    void request({});
  });
  sceneSelect.addEventListener('change', () => void loadScene(sceneSelect.value));
  window.addEventListener('resize', () => view.resize());

  try {
    const scenes = await api.listScenes();
    sceneSelect.replaceChildren(
      ...scenes.map((id) => new Option(id, id)),
    );
    if (scenes.length > 0) await loadScene(scenes[0]);
  } catch (err) {
    banner.textContent = `cannot reach service at ${BASE_URL}: ${String(err)}`;
    banner.className = 'banner error';
  }
}

void start();
