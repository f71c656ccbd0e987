export { AeonClient, AeonServiceError } from "./client.js";
export type { EventSummary, QueryResult, TraceHit, VectorPayload } from "./client.js";
export {
  AtlasReader, BlobArenaReader, EmbeddingReader, TraceReader,
  EVENT_SIZE, HEADER_SIZE, QUANT_FP32, QUANT_INT8,
  nodeStride, readDataset, readGenerationHeader,
} from "./formats.js";
export type { AtlasHeader, BlobRef, Dataset, GenerationHeader, TraceEvent } from "./formats.js";
export { aliases, byteView, decodeText, dequantize, dot, f32View, i8View, readonlyView, unwrap } from "./views.js";
