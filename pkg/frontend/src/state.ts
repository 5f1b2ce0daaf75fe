/** Viewer state and its transition rules.
 *
 * Invariants enforced here (and unit-tested):
 *  - the grasp overlay always equals the last *successful* response's grasps,
 *    verbatim — failures and stale responses never touch it;
 *  - one request in flight at a time: issuing a new request supersedes any
 *    pending one, whose eventual response is discarded;
 *  - switching scenes clears overlays and banners.
 */

import type { GraspRecord, GraspResponse, GuidanceMode } from './types.js';

export interface ViewerState {
  sceneId: string | null;
  mode: GuidanceMode;
  k: number;
  radius: number;
  /** last successful response's grasps, verbatim */
  grasps: GraspRecord[];
  /** full response the overlay came from (for fidelity checks / export) */
  lastResponse: GraspResponse | null;
  banner: string | null;
  busy: boolean;
}

export function initialState(): ViewerState {
  return {
    sceneId: null,
    mode: 'click',
    k: 48,
    radius: 0.08,
    grasps: [],
    lastResponse: null,
    banner: null,
    busy: false,
  };
}

export class ViewerStore {
  private state: ViewerState = initialState();
  private requestCounter = 0;
  private listeners: Array<(s: ViewerState) => void> = [];

  get(): ViewerState {
    return this.state;
  }

  subscribe(fn: (s: ViewerState) => void): void {
    this.listeners.push(fn);
  }

  private set(patch: Partial<ViewerState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  selectScene(sceneId: string): void {
    this.requestCounter += 1; // orphan any in-flight request
    this.set({ sceneId, grasps: [], lastResponse: null, banner: null, busy: false });
  }

  setMode(mode: GuidanceMode): void {
    this.set({ mode });
  }

  setK(k: number): void {
    this.set({ k });
  }

  setRadius(radius: number): void {
    this.set({ radius });
  }

  /** Mark a request as started; the returned token must accompany the
   *  response. A later beginRequest invalidates all earlier tokens. */
  beginRequest(): number {
    this.requestCounter += 1;
    this.set({ busy: true, banner: null });
    return this.requestCounter;
  }

  isCurrent(token: number): boolean {
    return token === this.requestCounter;
  }

  /** Install a successful response — only if it is still the latest. */
  applyResponse(token: number, response: GraspResponse): boolean {
    if (!this.isCurrent(token)) return false;
    this.set({
      grasps: response.grasps,
      lastResponse: response,
      banner: response.grasps.length === 0 ? 'no grasps returned' : null,
      busy: false,
    });
    return true;
  }

  /** Record a failure. Overlays are left exactly as they were. */
  applyFailure(token: number, status: number, detail: string): boolean {
    if (!this.isCurrent(token)) return false;
    const banner =
      status === 422 ? 'no graspable region here — try another spot' : detail;
    this.set({ banner, busy: false });
    return true;
  }
}
