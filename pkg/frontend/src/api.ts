/** Typed client for the JSON-over-HTTP control service.
 *
 * Tensors cross the wire as base64 little-endian bytes with dtype and shape
 * fields; this module decodes them into typed arrays. All displayed data is
 * fetched from the server — nothing numeric is computed client-side.
 */

export interface WireTensor {
  dtype: string;
  shape: number[];
  data: string; // base64, little-endian
}

export interface Tensor {
  dtype: string;
  shape: number[];
  data: Float64Array | Float32Array | Int32Array | Int64Values | Uint8Array;
}

/** Int64 arrives as BigInt64Array; expose plain numbers for UI use. */
export type Int64Values = Float64Array;

function base64Bytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function decodeTensor(wire: WireTensor): Tensor {
  const bytes = base64Bytes(wire.data);
  const buf = bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength);
  let data: Tensor["data"];
  switch (wire.dtype) {
    case "<f8":
      data = new Float64Array(buf);
      break;
    case "<f4":
      data = new Float32Array(buf);
      break;
    case "<i4":
      data = new Int32Array(buf);
      break;
    case "<i8": {
      const big = new BigInt64Array(buf);
      const nums = new Float64Array(big.length);
      for (let i = 0; i < big.length; i++) nums[i] = Number(big[i]);
      data = nums;
      break;
    }
    case "|u1":
    case "<u1":
      data = new Uint8Array(buf);
      break;
    default:
      throw new Error(`unsupported tensor dtype: ${wire.dtype}`);
  }
  return { dtype: wire.dtype, shape: wire.shape, data };
}

export interface ViewPayload {
  entity_id: WireTensor;
  depth: WireTensor;
  subregion: WireTensor;
}

export interface ObservationPayload {
  t: number;
  proprio: WireTensor;
  views: Record<string, ViewPayload>;
  instruction: string;
}

export interface SessionPayload {
  session_id: string;
  observation: ObservationPayload;
  embedding_images: Record<string, string>;
  affordance_types: string[];
}

export interface SpecResponse {
  representation_id: string;
  representation: WireTensor;
  n_subtasks: number;
  heatmaps: Record<string, Record<string, WireTensor>>;
}

export interface FramePayload {
  index: number;
  action: WireTensor;
  proprio: WireTensor;
  entity_image: WireTensor;
  events: unknown[][];
}

export interface StepResponse {
  frames: FramePayload[];
  events: unknown[][];
  done: boolean;
  steps_taken: number;
}

export interface ReportPayload {
  template: string;
  seed: number;
  instruction: string;
  specified: boolean;
  representation_id: string | null;
  steps_taken: number;
  done: boolean;
  success: boolean | null;
  event_log: unknown[];
}

export interface ApiError {
  status: number;
  code: string;
  message: string;
}

export class ServiceClient {
  constructor(private baseUrl: string) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.baseUrl + path, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    const body = await res.json();
    if (!res.ok) {
      const err = body?.error ?? { code: "unknown", message: "request failed" };
      throw Object.assign(new Error(err.message), {
        status: res.status,
        code: err.code,
      }) as Error & ApiError;
    }
    return body as T;
  }

  createSession(template: string, seed: number): Promise<SessionPayload> {
    return this.request("/session", {
      method: "POST",
      body: JSON.stringify({ template, seed }),
    });
  }

  getObservation(sessionId: string): Promise<ObservationPayload> {
    return this.request(`/session/${sessionId}/observation`);
  }

  submitPoints(
    sessionId: string,
    clicks: Record<string, { camera: string; pixel: [number, number] }>,
    motionToken?: string,
  ): Promise<SpecResponse> {
    return this.request(`/session/${sessionId}/spec/points`, {
      method: "POST",
      body: JSON.stringify({ clicks, motion_token: motionToken ?? null }),
    });
  }

  submitLanguage(sessionId: string, text: string): Promise<SpecResponse> {
    return this.request(`/session/${sessionId}/spec/language`, {
      method: "POST",
      body: JSON.stringify({ text }),
    });
  }

  stepRollout(sessionId: string): Promise<StepResponse> {
    return this.request(`/session/${sessionId}/rollout/step`, {
      method: "POST",
      body: JSON.stringify({}),
    });
  }

  getReport(sessionId: string): Promise<ReportPayload> {
    return this.request(`/session/${sessionId}/report`);
  }
}
